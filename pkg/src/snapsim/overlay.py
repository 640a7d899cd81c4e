"""Periodic snowball-tree (SBT) overlay families and their schedule validators.

A snowball tree disseminates one chunk by doubling the holder set every
transmission round: level 0 holds the peer fed by the server, and every peer
that holds the chunk uploads it to exactly one new peer per round, so level k
holds 2^(k-1) peers and the tree has depth ceil(log2 N).

Streaming needs a whole family of such trees.  The family built here is
periodic with period P: the server pushes chunk c into tree c mod P, and the
occupants of level k rotate through a fixed roster with a per-level period.
The construction guarantees that the uploads required in any one time slot
never ask the same peer to transmit twice, which is exactly what makes the
K-slot delivery bound achievable for every chunk simultaneously.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property


class OverlayError(ValueError):
    """The overlay cannot be built as requested or is structurally broken."""


class UnknownEdgeError(KeyError):
    """A schedule referenced an edge that does not exist in the overlay."""


def level_width(k: int) -> int:
    """Peers at depth k of one snowball tree: 1, 1, 2, 4, 8, ..."""
    return 1 if k < 2 else 2 ** (k - 1)


def tree_depth(n: int) -> int:
    """Dissemination rounds needed for n peers, ceil(log2 n)."""
    if n < 1:
        raise OverlayError(f"peer count must be positive, got {n}")
    return max(1, (n - 1).bit_length())


@dataclass(frozen=True)
class DelayModel:
    """Mean queueing/propagation delay and per-chunk transmission time."""

    d: float  # mean queueing + propagation delay, seconds
    t: float  # chunk (or packet) transmission time, seconds

    def __post_init__(self):
        if self.d < 0 or self.t <= 0:
            raise ValueError(f"need d >= 0 and t > 0, got d={self.d}, t={self.t}")


@dataclass(frozen=True)
class LevelRoster:
    """Ordered peers that rotate through one tree level with a fixed period.

    The roster is partitioned into `period` consecutive blocks of
    `level_width(level)` peers; tree i uses block i mod period.
    """

    level: int
    peers: tuple[int, ...]
    period: int

    def __post_init__(self):
        if self.period < 1:
            raise OverlayError(f"roster level {self.level}: period must be >= 1")
        if len(self.peers) != self.period * self.block_size:
            raise OverlayError(
                f"roster level {self.level}: {len(self.peers)} peers cannot fill "
                f"{self.period} blocks of {self.block_size}"
            )

    @property
    def block_size(self) -> int:
        return level_width(self.level)

    def block(self, tree_index: int) -> tuple[int, ...]:
        b = self.block_size
        start = (tree_index % self.period) * b
        return self.peers[start : start + b]


@dataclass(frozen=True)
class EdgeRef:
    """One upload edge: origin pushes to dest, who sits at `level` of `tree`."""

    tree: int
    level: int
    origin: int
    dest: int


@dataclass(frozen=True)
class Tree:
    """A single materialized snowball tree of the periodic family."""

    index: int
    levels: tuple[tuple[int, ...], ...]
    parent: dict[int, int]  # child -> parent; the root has no entry

    @property
    def root(self) -> int:
        return self.levels[0][0]

    @cached_property
    def level_of(self) -> dict[int, int]:
        return {p: k for k, lvl in enumerate(self.levels) for p in lvl}

    @cached_property
    def children(self) -> dict[int, list[int]]:
        """Children per parent, in upload (level) order."""
        out: dict[int, list[int]] = {}
        for lvl in self.levels[1:]:
            for child in lvl:
                out.setdefault(self.parent[child], []).append(child)
        return out

    def edges_into_level(self, k: int) -> list[EdgeRef]:
        return [EdgeRef(self.index, k, self.parent[c], c) for c in self.levels[k]]


@dataclass(frozen=True)
class MultiSbtOverlay:
    """A P-periodic family of snowball trees over a fixed peer population.

    Levels 0..len(rosters)-1 of tree i are roster blocks selected by
    i mod period(level).  Deeper levels are filled with the complement:
    the peers absent from the tree's roster levels, in session order,
    sliced into the remaining level widths.
    """

    peers: tuple[int, ...]
    depth: int  # K = ceil(log2 N)
    rosters: tuple[LevelRoster, ...]
    explicit_trees: tuple[Tree, ...] | None = None

    def __post_init__(self):
        # Duplicate peers (within the session, a roster, or across rosters)
        # are deliberately not rejected here: hand-corrupted overlays must be
        # loadable so validate_overlay can name the fault.
        if len(self.peers) < 2:
            raise OverlayError("an overlay needs at least two peers")

    # -- basic shape -----------------------------------------------------

    @property
    def peer_count(self) -> int:
        return len(self.peers)

    @cached_property
    def period(self) -> int:
        if self.explicit_trees is not None:
            return len(self.explicit_trees)
        return math.lcm(*(r.period for r in self.rosters)) if self.rosters else 1

    @property
    def tail_width(self) -> int:
        """Peers at the deepest level of every tree: N - 2^(K-1)."""
        return self.peer_count - 2 ** (self.depth - 1)

    @cached_property
    def roster_of(self) -> dict[int, tuple[int, int]]:
        """peer -> (roster level, index within roster) for rostered peers."""
        return {p: (r.level, j) for r in self.rosters for j, p in enumerate(r.peers)}

    @cached_property
    def unrostered(self) -> tuple[int, ...]:
        return tuple(p for p in self.peers if p not in self.roster_of)

    @cached_property
    def period_of_level(self) -> dict[int, int]:
        return {r.level: r.period for r in self.rosters}

    @cached_property
    def tail_parent_levels(self) -> tuple[int, ...]:
        """Roster levels whose peers may parent deepest-level children.

        A level-m block repeats with period P_m while the concurrent schedule
        walks K-1 consecutive trees through level m; only levels with
        P_m >= K - m leave a block free for the trailing tree's deep uploads.
        """
        return tuple(
            r.level for r in self.rosters if r.period >= self.depth - r.level
        )

    # -- tree materialization --------------------------------------------

    @cached_property
    def _tree_cache(self) -> dict[int, Tree]:
        return {}

    def tree(self, index: int) -> Tree:
        index %= self.period
        if self.explicit_trees is not None:
            return self.explicit_trees[index]
        cached = self._tree_cache.get(index)
        if cached is None:
            cached = self._build_tree(index)
            self._tree_cache[index] = cached
        return cached

    def trees(self) -> list[Tree]:
        return [self.tree(i) for i in range(self.period)]

    def _complement(self, index: int) -> list[int]:
        """Peers outside tree `index`'s roster levels: unused roster blocks in
        level order, then unrostered peers in session order."""
        out: list[int] = []
        for r in self.rosters:
            b = r.block_size
            drop = (index % r.period) * b
            out.extend(r.peers[:drop])
            out.extend(r.peers[drop + b :])
        out.extend(self.unrostered)
        return out

    def _build_tree(self, index: int) -> Tree:
        levels: list[tuple[int, ...]] = [r.block(index) for r in self.rosters]
        comp = self._complement(index)
        for k in range(len(self.rosters), self.depth):
            w = level_width(k)
            levels.append(tuple(comp[:w]))
            comp = comp[w:]
        levels.append(tuple(comp))
        if len(levels[-1]) != self.tail_width:
            raise OverlayError(
                f"tree {index}: deepest level holds {len(levels[-1])} peers, "
                f"expected {self.tail_width}"
            )
        parent: dict[int, int] = {}
        flat: list[int] = []
        for k in range(1, self.depth):
            flat.extend(levels[k - 1])
            for feeder, child in zip(flat, levels[k]):
                parent[child] = feeder
        pool = [p for m in self.tail_parent_levels for p in levels[m]]
        tail = levels[self.depth]
        if len(pool) < len(tail):
            raise OverlayError(
                f"tree {index}: only {len(pool)} eligible deep parents for "
                f"{len(tail)} deepest-level peers"
            )
        for feeder, child in zip(pool[len(pool) - len(tail) :], tail):
            parent[child] = feeder
        return Tree(index=index, levels=tuple(levels), parent=parent)


# -- constructors ---------------------------------------------------------


def build_multi_sbt_pow2(peers: list[int] | tuple[int, ...]) -> MultiSbtOverlay:
    """Build the periodic family for exactly 2^K peers.

    Level-k rosters get (K-k) * level_width(k) peers in session order, which
    consumes 2^K - 1 peers; the one peer left over joins the level-1 roster
    and raises that level's rotation period from K-1 to K, shrinking the
    overall period to lcm(K, K, K-2, K-3, ..., 1).
    """
    peers = tuple(peers)
    n = len(peers)
    k = n.bit_length() - 1
    if n < 2 or 2**k != n:
        raise OverlayError(f"peer count {n} is not a power of two >= 2")
    if len(set(peers)) != n:
        raise OverlayError("duplicate peer ids")
    rosters: list[LevelRoster] = []
    cursor = 0
    for lvl in range(k):
        take = (k - lvl) * level_width(lvl)
        chunk = peers[cursor : cursor + take]
        cursor += take
        rosters.append(LevelRoster(level=lvl, peers=chunk, period=k - lvl))
    leftover = peers[cursor]
    if k >= 2:
        s1 = rosters[1]
        rosters[1] = LevelRoster(level=1, peers=s1.peers + (leftover,), period=k)
    # k == 1: the leftover peer stays unrostered and fills level 1 of the
    # single tree as the complement.
    return MultiSbtOverlay(peers=peers, depth=k, rosters=tuple(rosters))


def _representable(target: int, widths: list[int]) -> bool:
    sums = 1  # bitset of achievable subset sums
    for w in widths:
        sums |= sums << w
    return bool(sums >> target & 1)


def choose_extension_levels(remainder: int, depth: int, policy: str) -> list[int]:
    """Pick the set of levels whose rotation periods absorb `remainder` peers.

    "single-level" uses one level whose block width equals the remainder when
    such a level exists, falling back to a deepest-first decomposition.
    "low-levels" prefers the shallowest levels (the option of growing the
    periods of levels 0, 1, 2, ... by one each).
    """
    widths = {lvl: level_width(lvl) for lvl in range(depth)}
    if policy == "single-level":
        exact = [lvl for lvl, w in widths.items() if w == remainder]
        if exact:
            return [max(exact)]
        policy = "deep"
    if policy in ("deep", "single-level"):
        chosen: list[int] = []
        left = remainder
        for lvl in sorted(widths, reverse=True):
            if widths[lvl] <= left:
                chosen.append(lvl)
                left -= widths[lvl]
        if left:
            raise OverlayError(f"cannot decompose remainder {remainder}")
        return sorted(chosen)
    if policy == "low-levels":
        chosen = []
        left = remainder
        levels = sorted(widths)
        for pos, lvl in enumerate(levels):
            rest = [widths[x] for x in levels[pos + 1 :]]
            if widths[lvl] <= left and _representable(left - widths[lvl], rest):
                chosen.append(lvl)
                left -= widths[lvl]
            if not left:
                break
        if left:
            raise OverlayError(f"cannot decompose remainder {remainder}")
        return chosen
    raise OverlayError(f"unknown extension policy {policy!r}")


def extend_multi_sbt(
    peers: list[int] | tuple[int, ...],
    policy: str = "single-level",
    levels: list[int] | None = None,
) -> MultiSbtOverlay:
    """Build the family for N strictly between two powers of two.

    Runs the power-of-two construction on the first 2^floor(log2 N) peers,
    then grows the rotation period of each chosen level by one block, placing
    the extra peers there.  The grown levels are exactly the ones whose peers
    feed the short deepest level (N - 2^(K-1) peers) of every tree.
    """
    peers = tuple(peers)
    n = len(peers)
    if len(set(peers)) != n:
        raise OverlayError("duplicate peer ids")
    k = tree_depth(n)
    base_n = 2 ** (k - 1)
    if n <= 2 or n == 2**k:
        raise OverlayError(
            f"peer count {n} is a power of two; use build_multi_sbt_pow2"
        )
    base = build_multi_sbt_pow2(peers[:base_n])
    remainder = n - base_n
    chosen = sorted(levels) if levels is not None else choose_extension_levels(
        remainder, k, policy
    )
    if sum(level_width(lvl) for lvl in chosen) != remainder:
        raise OverlayError(
            f"extension levels {chosen} absorb "
            f"{sum(level_width(lvl) for lvl in chosen)} peers, need {remainder}"
        )
    if len(set(chosen)) != len(chosen) or any(not 0 <= lvl < k for lvl in chosen):
        raise OverlayError(f"extension levels {chosen} out of range for depth {k}")
    rosters = {r.level: r for r in base.rosters}
    extra = list(peers[base_n:])
    for lvl in chosen:
        w = level_width(lvl)
        block, extra = tuple(extra[:w]), extra[w:]
        old = rosters.get(lvl)
        if old is None:
            rosters[lvl] = LevelRoster(level=lvl, peers=block, period=1)
        else:
            rosters[lvl] = LevelRoster(
                level=lvl, peers=old.peers + block, period=old.period + 1
            )
    ordered = tuple(rosters[lvl] for lvl in sorted(rosters))
    overlay = MultiSbtOverlay(peers=peers, depth=k, rosters=ordered)
    if sum(level_width(m) for m in overlay.tail_parent_levels) < overlay.tail_width:
        raise OverlayError(
            f"extension levels {chosen} leave too few deep-parent candidates"
        )
    return overlay


def build_overlay(peers: list[int] | tuple[int, ...], policy: str = "single-level",
                  levels: list[int] | None = None) -> MultiSbtOverlay:
    """Dispatch to the power-of-two or extension constructor."""
    n = len(peers)
    if n >= 2 and n == 2 ** (n.bit_length() - 1):
        return build_multi_sbt_pow2(peers)
    return extend_multi_sbt(peers, policy=policy, levels=levels)


# -- schedule validation ---------------------------------------------------


@dataclass(frozen=True)
class Violation:
    kind: str  # "shared-origin" or "causality"
    detail: str
    edges: tuple[EdgeRef, ...]

    def __str__(self):
        return f"{self.kind}: {self.detail}"


def validate_schedule(
    edges: list[EdgeRef] | tuple[EdgeRef, ...], overlay: MultiSbtOverlay
) -> list[Violation]:
    """Check that a set of edges may upload concurrently in one slot.

    Rules: no two edges share an origin (each peer transmits at most one
    chunk at a time), and for edges in trees i and j at levels k1 and k2 the
    level gap must match the tree gap, (k2 - k1) mod P <= (i - j) mod P,
    applied in both directions.  Same-tree edges therefore must sit in level
    sets that coincide modulo P, which for P >= K means the same level set.
    """
    p = overlay.period
    for e in edges:
        t = overlay.tree(e.tree)
        if t.parent.get(e.dest) != e.origin or t.level_of.get(e.dest) != e.level:
            raise UnknownEdgeError(f"edge {e} not present in overlay")
    violations: list[Violation] = []
    by_origin: dict[int, list[EdgeRef]] = {}
    for e in edges:
        by_origin.setdefault(e.origin, []).append(e)
    for origin, group in by_origin.items():
        if len(group) > 1:
            violations.append(
                Violation(
                    kind="shared-origin",
                    detail=f"peer {origin} would upload {len(group)} edges at once",
                    edges=tuple(group[:2]),
                )
            )
    groups: dict[tuple[int, int], EdgeRef] = {}
    for e in edges:
        groups.setdefault((e.tree % p, e.level), e)
    keys = sorted(groups)
    for a_idx, (i, k1) in enumerate(keys):
        for j, k2 in keys[a_idx + 1 :]:
            gap = (i - j) % p
            if (k2 - k1) % p > gap or (k1 - k2) % p > (j - i) % p:
                violations.append(
                    Violation(
                        kind="causality",
                        detail=(
                            f"level {k2} of tree {j} cannot run with level {k1} "
                            f"of tree {i} (tree gap {gap})"
                        ),
                        edges=(groups[(i, k1)], groups[(j, k2)]),
                    )
                )
    return violations


def concurrent_schedule(overlay: MultiSbtOverlay, anchor: int) -> list[EdgeRef]:
    """The maximal one-slot schedule fired when tree `anchor` starts level 1.

    Level k runs in the tree that received its chunk k-1 slots before the
    anchor's: all edges into level k of tree anchor-k+1 (indices mod P), for
    k = 1..K.  The deepest level contributes its N - 2^(K-1) edges.
    """
    p = overlay.period
    if not 0 <= anchor < p:
        raise OverlayError(f"anchor {anchor} outside [0, {p})")
    edges: list[EdgeRef] = []
    for k in range(1, overlay.depth + 1):
        edges.extend(overlay.tree((anchor - k + 1) % p).edges_into_level(k))
    return edges


@dataclass(frozen=True)
class OriginSet:
    """Duplicate-free origins of one concurrent schedule (the independence
    certificate: its size N-1 means every other peer uploads this slot)."""

    anchor: int
    members: tuple[int, ...]


def upload_origin_set(overlay: MultiSbtOverlay, anchor: int) -> OriginSet:
    origins = [e.origin for e in concurrent_schedule(overlay, anchor)]
    dups = {o for o in origins if origins.count(o) > 1}
    if dups:
        raise OverlayError(
            f"anchor {anchor}: origins {sorted(dups)} appear twice in the "
            "concurrent schedule (construction bug)"
        )
    return OriginSet(anchor=anchor, members=tuple(origins))


@dataclass(frozen=True)
class OverlayReport:
    ok: bool
    failures: dict[int, list[Violation]]  # anchor -> violations

    def __str__(self):
        if self.ok:
            return "ok"
        lines = [
            f"anchor {a}: {v}" for a, vs in sorted(self.failures.items()) for v in vs
        ]
        return "\n".join(lines)


def validate_overlay(overlay: MultiSbtOverlay) -> OverlayReport:
    """Run every anchor's concurrent schedule through validate_schedule."""
    failures: dict[int, list[Violation]] = {}
    for anchor in range(overlay.period):
        vs = validate_schedule(concurrent_schedule(overlay, anchor), overlay)
        seen: dict[int, int] = {}
        t = overlay.tree(anchor)
        for lvl in t.levels:
            for peer in lvl:
                seen[peer] = seen.get(peer, 0) + 1
        for peer, cnt in seen.items():
            if cnt > 1:
                vs.append(
                    Violation(
                        kind="shared-origin",
                        detail=f"peer {peer} appears {cnt} times in tree {anchor}",
                        edges=(),
                    )
                )
        if vs:
            failures[anchor] = vs
    return OverlayReport(ok=not failures, failures=failures)


# -- serialization ---------------------------------------------------------


def overlay_to_doc(overlay: MultiSbtOverlay) -> dict:
    """JSON-ready document: {N, K, P, rosters, trees}."""
    return {
        "N": overlay.peer_count,
        "K": overlay.depth,
        "P": overlay.period,
        "rosters": [list(r.peers) for r in overlay.rosters],
        "trees": [
            {
                "levels": [list(lvl) for lvl in t.levels],
                "parents": {str(c): par for c, par in sorted(t.parent.items())},
            }
            for t in overlay.trees()
        ],
    }


def overlay_from_doc(doc: dict) -> MultiSbtOverlay:
    """Rebuild an overlay from its document form (explicit trees)."""
    try:
        depth = int(doc["K"])
        rosters = tuple(
            LevelRoster(
                level=lvl,
                peers=tuple(peers),
                period=len(peers) // level_width(lvl) if peers else 1,
            )
            for lvl, peers in enumerate(doc["rosters"])
        )
        trees = tuple(
            Tree(
                index=i,
                levels=tuple(tuple(lvl) for lvl in td["levels"]),
                parent={int(c): par for c, par in td["parents"].items()},
            )
            for i, td in enumerate(doc["trees"])
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise OverlayError(f"malformed overlay document: {exc}") from exc
    peers = tuple(p for lvl in trees[0].levels for p in lvl)
    if len(peers) != int(doc["N"]):
        raise OverlayError("overlay document: tree 0 does not cover N peers")
    return MultiSbtOverlay(
        peers=peers, depth=depth, rosters=rosters, explicit_trees=trees
    )


def dump_overlay(overlay: MultiSbtOverlay) -> str:
    return json.dumps(overlay_to_doc(overlay), indent=2)


def load_overlay(text: str) -> MultiSbtOverlay:
    return overlay_from_doc(json.loads(text))
