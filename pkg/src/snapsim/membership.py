"""Admission control, backbone joins, and departure repair.

The backbone only admits peers labeled stable that can dedicate the baseline
upload bandwidth.  Joins and departures reshape the roster family locally
where a valid family exists (growing or dissolving single-peer blocks at the
shallow levels), and fall back to a fresh build when the peer count crosses
a power of two or no local surgery yields a valid family.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

from .overlay import (
    EdgeRef,
    LevelRoster,
    MultiSbtOverlay,
    OverlayError,
    build_multi_sbt_pow2,
    build_overlay,
    extend_multi_sbt,
    level_width,
    tree_depth,
    validate_overlay,
)
from .schedule import NeighborTable, derive_neighbor_tables


@dataclass(frozen=True)
class PeerProfile:
    id: int
    upload_bw: float  # bits/second
    labeled_stable: bool
    truly_stable: bool
    join_time: float = 0.0

    def __post_init__(self):
        if self.upload_bw < 0:
            raise ValueError(f"peer {self.id}: negative upload bandwidth")


@dataclass(frozen=True)
class Admission:
    tier: str  # "backbone" | "second_tier"
    surplus: float  # bits/second left after the baseline slice (backbone only)


def admit(profile: PeerProfile, b_base: float) -> Admission:
    """Backbone iff labeled stable and able to dedicate the baseline rate."""
    if b_base <= 0:
        raise ValueError(f"baseline bandwidth must be positive, got {b_base}")
    if profile.labeled_stable and profile.upload_bw >= b_base:
        return Admission(tier="backbone", surplus=profile.upload_bw - b_base)
    return Admission(tier="second_tier", surplus=0.0)


@dataclass
class RepairPlan:
    departed: int
    replacements: tuple[tuple[int, int, int], ...]  # (tree, old peer, new peer)
    removed_edges: tuple[EdgeRef, ...]
    table_updates: dict[int, NeighborTable]
    overlay: MultiSbtOverlay  # the repaired overlay, not serialized

    def to_doc(self) -> dict:
        return {
            "departed": self.departed,
            "replacements": [list(r) for r in self.replacements],
            "removed_edges": [
                {"tree": e.tree, "level": e.level, "origin": e.origin, "dest": e.dest}
                for e in self.removed_edges
            ],
            "table_updates": {
                str(owner): [[t, list(children)] for t, children in table.subsets]
                for owner, table in sorted(self.table_updates.items())
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_doc(), indent=2)


def starvation_alerts(
    overlay: MultiSbtOverlay, departed: int
) -> dict[int, list[int]]:
    """Children left without a feeder, per tree where `departed` is internal."""
    if departed not in overlay.peers:
        raise OverlayError(f"peer {departed} is not in the overlay")
    alerts: dict[int, list[int]] = {}
    for i in range(overlay.period):
        children = overlay.tree(i).children.get(departed)
        if children:
            alerts[i] = list(children)
    return alerts


# -- family surgery ---------------------------------------------------------


def _family_ok(rosters: list[LevelRoster], n: int, depth: int) -> bool:
    """Structural conditions for a valid periodic family.

    Roster levels 0..depth-2 must exist with periods no smaller than the
    number of consecutive trees the concurrent schedule walks through them,
    and the levels eligible to feed the short deepest level must jointly
    offer at least N - 2^(K-1) feeders.
    """
    by_level = {r.level: r for r in rosters}
    if any(lvl >= depth for lvl in by_level):
        return False
    for m in range(depth - 1):
        r = by_level.get(m)
        if r is None or r.period < max(1, depth - 1 - m):
            return False
    rostered = sum(len(r.peers) for r in rosters)
    if rostered > n:
        return False
    pool = sum(
        level_width(r.level) for r in rosters if r.period >= depth - r.level
    )
    return pool >= n - 2 ** (depth - 1)


def _rebuild(peers: tuple[int, ...]) -> MultiSbtOverlay:
    return build_overlay(peers)


def _grown_rosters(
    overlay: MultiSbtOverlay, level: int, peer: int
) -> list[LevelRoster]:
    rosters = {r.level: r for r in overlay.rosters}
    old = rosters.get(level)
    if old is None:
        rosters[level] = LevelRoster(level=level, peers=(peer,), period=1)
    else:
        rosters[level] = LevelRoster(
            level=level, peers=old.peers + (peer,), period=old.period + 1
        )
    return [rosters[lvl] for lvl in sorted(rosters)]


def join_backbone(
    overlay: MultiSbtOverlay, peer: int
) -> tuple[MultiSbtOverlay, dict[int, NeighborTable]]:
    """Admit one peer into the push structure by growing a rotation period.

    Prefers growing a single-peer block at level 1, then level 0; rebuilds
    from scratch only when the new count is an exact power of two (the whole
    family changes shape) or no single-level growth validates.
    """
    if peer in overlay.peers:
        raise OverlayError(f"peer {peer} already in the overlay")
    new_peers = overlay.peers + (peer,)
    n = len(new_peers)
    depth = tree_depth(n)
    candidate: MultiSbtOverlay | None = None
    if n == 2 ** (n.bit_length() - 1):
        candidate = build_multi_sbt_pow2(new_peers)
    else:
        for lvl in (1, 0):
            rosters = _grown_rosters(overlay, lvl, peer)
            if not _family_ok(rosters, n, depth):
                continue
            trial = MultiSbtOverlay(
                peers=new_peers, depth=depth, rosters=tuple(rosters)
            )
            if validate_overlay(trial).ok:
                candidate = trial
                break
        if candidate is None:
            candidate = extend_multi_sbt(new_peers)
    report = validate_overlay(candidate)
    if not report.ok:
        raise OverlayError(f"join produced an invalid overlay:\n{report}")
    return candidate, _table_diff(overlay, candidate)


def handle_departure(overlay: MultiSbtOverlay, departed: int) -> RepairPlan:
    """Remove a peer and locally repair the family.

    A leaf-only peer just disappears (the complement shrinks by itself).  A
    rostered peer's slot is filled by promoting an unrostered peer when one
    exists; otherwise the last single-peer block of level 1 (then level 0)
    dissolves and that peer moves into the vacated slot, shrinking one
    rotation period.  Crossing below a power of two forces a rebuild.
    """
    if departed not in overlay.peers:
        raise OverlayError(f"peer {departed} is not in the overlay")
    if overlay.peer_count - 1 < 2:
        raise OverlayError("repair would leave fewer than two peers")
    removed = tuple(
        EdgeRef(i, overlay.tree(i).level_of[departed], parent, departed)
        for i in range(overlay.period)
        for parent in [overlay.tree(i).parent.get(departed)]
        if parent is not None
    )
    survivors = tuple(p for p in overlay.peers if p != departed)
    depth = tree_depth(len(survivors))
    loc = overlay.roster_of.get(departed)
    new_overlay: MultiSbtOverlay | None = None
    if loc is None and depth == overlay.depth:
        new_overlay = MultiSbtOverlay(
            peers=survivors, depth=overlay.depth, rosters=overlay.rosters
        )
        if not validate_overlay(new_overlay).ok:  # pragma: no cover - safety net
            new_overlay = None
    elif loc is not None and depth == overlay.depth:
        for candidate_rosters in _repair_candidates(overlay, departed, loc):
            if not _family_ok(candidate_rosters, len(survivors), depth):
                continue
            trial = MultiSbtOverlay(
                peers=survivors, depth=depth, rosters=tuple(candidate_rosters)
            )
            if validate_overlay(trial).ok:
                new_overlay = trial
                break
    if new_overlay is None:
        new_overlay = _rebuild(survivors)
        report = validate_overlay(new_overlay)
        if not report.ok:
            raise OverlayError(f"rebuild after departure failed:\n{report}")
    return RepairPlan(
        departed=departed,
        replacements=_slot_diff(overlay, new_overlay),
        removed_edges=removed,
        table_updates=_table_diff(overlay, new_overlay),
        overlay=new_overlay,
    )


def _repair_candidates(overlay, departed, loc):
    """Roster families to try, cheapest table churn first."""
    level, idx = loc
    rosters = {r.level: r for r in overlay.rosters}

    # 1. promote an unrostered (leaf-only) peer into the vacated slot
    for stand_in in sorted(overlay.unrostered):
        new = dict(rosters)
        r = new[level]
        peers = list(r.peers)
        peers[idx] = stand_in
        new[level] = replace(r, peers=tuple(peers))
        yield [new[lvl] for lvl in sorted(new)]

    # 2. dissolve the trailing single-peer block of a shallow level; its
    # occupant (or nobody, if the departed peer held it) fills the slot
    for lvl in (1, 0):
        src = rosters.get(lvl)
        if src is None or src.period < 2 and lvl != level:
            continue
        new = dict(rosters)
        if lvl == level:
            peers = list(src.peers)
            peers.pop(idx)
            if idx != len(src.peers) - 1:
                # move the trailing occupant into the vacated slot
                donor = peers.pop()
                peers.insert(idx, donor)
            if peers:
                new[lvl] = replace(src, peers=tuple(peers), period=src.period - 1)
            else:
                del new[lvl]
        else:
            if src.period < 1 or not src.peers:
                continue
            donor = src.peers[-1]
            if src.period == 1:
                del new[lvl]
            else:
                new[lvl] = replace(src, peers=src.peers[:-1], period=src.period - 1)
            tgt = new[level]
            peers = list(tgt.peers)
            peers[idx] = donor
            new[level] = replace(tgt, peers=tuple(peers))
        yield [new[m] for m in sorted(new)]


def _slot_diff(
    old: MultiSbtOverlay, new: MultiSbtOverlay
) -> tuple[tuple[int, int, int], ...]:
    """Per-tree occupancy changes (tree, old occupant, new occupant),
    compared position-wise over the new overlay's period."""
    diffs: list[tuple[int, int, int]] = []
    for i in range(new.period):
        t_old, t_new = old.tree(i), new.tree(i)
        for lvl_old, lvl_new in zip(t_old.levels, t_new.levels):
            for occ_old, occ_new in zip(lvl_old, lvl_new):
                if occ_old != occ_new:
                    diffs.append((i, occ_old, occ_new))
    return tuple(diffs)


def _table_diff(
    old: MultiSbtOverlay, new: MultiSbtOverlay
) -> dict[int, NeighborTable]:
    """Tables whose deduplicated subset content changed between overlays."""
    old_tables = derive_neighbor_tables(old, _validate=False)
    new_tables = derive_neighbor_tables(new, _validate=False)
    updates: dict[int, NeighborTable] = {}
    for peer, table in new_tables.items():
        before = old_tables.get(peer)
        if before is None or before.content_key() != table.content_key():
            updates[peer] = table
    return updates
