"""Distributed push state: per-peer neighbor tables and the slot oracle.

The slot oracle is the executable form of the minimum-delay argument: time
advances in whole chunk-transmission slots, the server emits chunk c during
slot c into tree c mod P, and every edge into level k of that tree uploads
during slot c + k.  If the overlay is sound, no peer is ever asked to upload
twice in a slot and every chunk reaches everyone within depth slots.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from math import gcd

from .overlay import (
    EdgeRef,
    MultiSbtOverlay,
    OverlayError,
    Violation,
    level_width,
    validate_overlay,
    validate_schedule,
)


class StarvationError(RuntimeError):
    """A peer was scheduled to upload a chunk it has not received."""


class SlotScheduleError(RuntimeError):
    """A simulated slot violated the concurrency rules."""

    def __init__(self, slot: int, violations: list[Violation]):
        self.slot = slot
        self.violations = violations
        listing = "; ".join(str(v) for v in violations)
        super().__init__(f"slot {slot}: {listing}")


@dataclass
class NeighborTable:
    """Children of one peer, grouped per tree in which it is internal.

    Subsets are ordered by tree index and replayed round-robin as chunks
    arrive; within a subset children are pushed sequentially in level order.
    """

    owner: int
    subsets: tuple[tuple[int, tuple[int, ...]], ...]  # (tree, children)
    cursor: int = 0

    def distinct_entries(self) -> int:
        return len({c for _, children in self.subsets for c in children})

    def children_for_tree(self, tree: int) -> tuple[int, ...]:
        for t, children in self.subsets:
            if t == tree:
                return children
        return ()

    def content_key(self) -> tuple[tuple[int, ...], ...]:
        """Subset contents with tree indices and repeats stripped, for
        comparing tables across overlays with different periods."""
        return tuple(sorted({children for _, children in self.subsets}))


def derive_neighbor_tables(
    overlay: MultiSbtOverlay, _validate: bool = True
) -> dict[int, NeighborTable]:
    """Neighbor table per peer; replaying them reproduces the tree edges."""
    if _validate:
        report = validate_overlay(overlay)
        if not report.ok:
            raise OverlayError(f"overlay invalid:\n{report}")
    per_peer: dict[int, list[tuple[int, tuple[int, ...]]]] = {p: [] for p in overlay.peers}
    for i in range(overlay.period):
        tree = overlay.tree(i)
        for parent, children in tree.children.items():
            per_peer[parent].append((i, tuple(children)))
    return {
        p: NeighborTable(owner=p, subsets=tuple(subsets))
        for p, subsets in per_peer.items()
    }


def distinct_child_count(overlay: MultiSbtOverlay, peer: int) -> int:
    """Distinct peers in `peer`'s neighbor table, computed from the roster
    arithmetic without materializing any tree.

    A child's identity depends on the tree index only through one small
    modulus (the child level's rotation period, or the period of the roster
    group backing a complement slot), so enumerating residues suffices.
    This is what makes the table-size bound checkable at large N.
    """
    if overlay.explicit_trees is not None:
        table = derive_neighbor_tables(overlay, _validate=False)[peer]
        return table.distinct_entries()
    loc = overlay.roster_of.get(peer)
    if loc is None:
        return 0  # never internal
    level, idx = loc
    roster = overlay.rosters[level]
    my_period = roster.period
    my_block = idx // roster.block_size
    flat_pos = idx % roster.block_size + (0 if level == 0 else 2 ** (level - 1))

    rosters = {r.level: r for r in overlay.rosters}
    n_roster_levels = len(overlay.rosters)
    depth = overlay.depth

    # complement layout: per roster level, (period-1)*block peers, then the
    # unrostered peers; constant group sizes across trees.
    groups: list[tuple[int, int]] = []  # (roster level, group length), -1 = unrostered
    for r in overlay.rosters:
        groups.append((r.level, (r.period - 1) * r.block_size))
    groups.append((-1, len(overlay.unrostered)))

    def complement_slot(position: int, tree_index: int) -> int:
        off = position
        for g_level, g_len in groups:
            if off < g_len:
                if g_level < 0:
                    return overlay.unrostered[off]
                r = rosters[g_level]
                drop = (tree_index % r.period) * r.block_size
                return r.peers[off] if off < drop else r.peers[off + r.block_size]
            off -= g_len
        raise OverlayError("complement position out of range")

    def residues(modulus: int) -> list[int]:
        g = gcd(my_period, modulus)
        base = my_block % g
        return [c for c in range(modulus) if c % g == base]

    children: set[int] = set()
    # roster-level children (levels level+1 .. n_roster_levels-1)
    for k2 in range(level + 1, n_roster_levels):
        r2 = overlay.rosters[k2]
        for c in residues(r2.period):
            children.add(r2.peers[c * r2.block_size + flat_pos])
    # complement-filled children below the deepest level
    comp_offset = 0
    for k2 in range(n_roster_levels, depth):
        pos = comp_offset + flat_pos
        mod = 1
        off = pos
        for g_level, g_len in groups:
            if off < g_len:
                mod = rosters[g_level].period if g_level >= 0 else 1
                break
            off -= g_len
        for c in residues(mod) if mod > 1 else [0]:
            # re-resolve with a concrete tree index matching residue c
            t_index = _tree_with_residues(overlay, my_period, my_block, mod, c)
            children.add(complement_slot(pos, t_index))
        comp_offset += level_width(k2)
    # deepest-level child, fed by the tail parent pool
    pool_levels = overlay.tail_parent_levels
    if level in pool_levels:
        pool_pos = sum(level_width(m) for m in pool_levels if m < level) + (
            idx % roster.block_size
        )
        pool_len = sum(level_width(m) for m in pool_levels)
        tail_index = pool_pos - (pool_len - overlay.tail_width)
        if tail_index >= 0:
            pos = comp_offset + tail_index
            mod = 1
            off = pos
            for g_level, g_len in groups:
                if off < g_len:
                    mod = rosters[g_level].period if g_level >= 0 else 1
                    break
                off -= g_len
            for c in residues(mod) if mod > 1 else [0]:
                t_index = _tree_with_residues(overlay, my_period, my_block, mod, c)
                children.add(complement_slot(pos, t_index))
    return len(children)


def _tree_with_residues(overlay, period_a: int, residue_a: int, period_b: int, residue_b: int) -> int:
    """Smallest tree index congruent to residue_a mod period_a and residue_b
    mod period_b; such an index exists because both divide the overall
    period and the residues share their gcd class."""
    for i in range(residue_a, overlay.period, period_a):
        if i % period_b == residue_b:
            return i
    raise OverlayError("incompatible residues")  # unreachable for valid families


def max_distinct_entries(overlay: MultiSbtOverlay) -> int:
    return max(distinct_child_count(overlay, p) for p in overlay.peers)


@dataclass(frozen=True)
class SlotSchedule:
    slot: int
    uploads: tuple[EdgeRef, ...]
    server_target: int | None


@dataclass(frozen=True)
class ChunkTrace:
    """Delivery record for one chunk: peer -> first slot holding it.

    The server transmits during `emit_slot`, so the root holds the chunk
    from emit_slot + 1 and a level-k peer from emit_slot + k + 1.  The lag
    compared against the depth bound excludes the server transfer.
    """

    chunk: int
    emit_slot: int
    delivery: dict[int, int]

    def lag(self) -> int:
        return max(self.delivery.values()) - self.emit_slot - 1


def server_push_plan(overlay: MultiSbtOverlay, num_chunks: int) -> list[int]:
    """Tree targeted per chunk: plain round robin over the period."""
    if num_chunks < 1:
        raise ValueError(f"need num_chunks >= 1, got {num_chunks}")
    return [c % overlay.period for c in range(num_chunks)]


def simulate_slots(
    overlay: MultiSbtOverlay, num_chunks: int, collect_slots: bool = False
) -> list[ChunkTrace] | tuple[list[ChunkTrace], list[SlotSchedule]]:
    """Synchronous brute-force oracle for the push schedule.

    Every peer uploads at most one chunk per slot; uploads follow the
    neighbor-table order (each tree's edges fire level by level).  Raises
    StarvationError if an origin lacks its chunk and SlotScheduleError if a
    slot's upload set breaks the concurrency rules.
    """
    if num_chunks < overlay.period:
        raise ValueError(
            f"need num_chunks >= period ({overlay.period}), got {num_chunks}"
        )
    p, depth = overlay.period, overlay.depth
    held: dict[int, dict[int, int]] = {c: {} for c in range(num_chunks)}
    for c in range(num_chunks):
        held[c][overlay.tree(c % p).root] = c + 1
    slot_records: list[SlotSchedule] = []
    for slot in range(1, num_chunks + depth):
        uploads: list[EdgeRef] = []
        for k in range(1, depth + 1):
            c = slot - k
            if not 0 <= c < num_chunks:
                continue
            tree = overlay.tree(c % p)
            for edge in tree.edges_into_level(k):
                when = held[c].get(edge.origin)
                if when is None or when > slot:
                    raise StarvationError(
                        f"slot {slot}: peer {edge.origin} must push chunk {c} "
                        f"but received it at {when}"
                    )
                uploads.append(edge)
                held[c][edge.dest] = slot + 1
        violations = validate_schedule(uploads, overlay)
        if violations:
            raise SlotScheduleError(slot, violations)
        if collect_slots:
            slot_records.append(
                SlotSchedule(
                    slot=slot,
                    uploads=tuple(uploads),
                    server_target=(slot % p) if slot < num_chunks else None,
                )
            )
    traces = [
        ChunkTrace(chunk=c, emit_slot=c, delivery=held[c]) for c in range(num_chunks)
    ]
    for tr in traces:
        if len(tr.delivery) != overlay.peer_count:
            raise StarvationError(
                f"chunk {tr.chunk} reached {len(tr.delivery)} of "
                f"{overlay.peer_count} peers"
            )
    if collect_slots:
        return traces, slot_records
    return traces


def per_peer_upload_load(
    traces: list[ChunkTrace], overlay: MultiSbtOverlay
) -> dict[int, float]:
    """Steady-state uploads per slot per peer, reconstructed from traces.

    The warm-up and drain slots (the first and last `depth`) are excluded so
    every counted slot carries a full complement of in-flight chunks.
    """
    depth, p = overlay.depth, overlay.period
    last_emit = max(tr.emit_slot for tr in traces)
    lo, hi = depth, last_emit  # inclusive window of steady slots
    if hi < lo:
        raise ValueError("trace too short for a steady-state window")
    counts: dict[int, int] = {peer: 0 for peer in overlay.peers}
    for tr in traces:
        tree = overlay.tree(tr.chunk % p)
        for peer, received in tr.delivery.items():
            feeder = tree.parent.get(peer)
            if feeder is None:
                continue
            upload_slot = received - 1
            if lo <= upload_slot <= hi:
                counts[feeder] += 1
    window = hi - lo + 1
    return {peer: counts[peer] / window for peer in overlay.peers}


def traces_to_csv(traces: list[ChunkTrace]) -> str:
    buf = io.StringIO()
    buf.write("chunk_id,peer_id,emit_slot,recv_slot\n")
    for tr in traces:
        for peer in sorted(tr.delivery):
            buf.write(f"{tr.chunk},{peer},{tr.emit_slot},{tr.delivery[peer]}\n")
    return buf.getvalue()
