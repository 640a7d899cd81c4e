"""Deterministic discrete-event simulation of push backbones and pull meshes.

One simulation owns one event heap; ties break on (kind rank, sequence
number) so identical configurations replay identical event logs.  Transfers
model pipelining: a sender's transmissions chain back to back on its uplink
slice and each arrival pays the link's propagation delay once, so the m-th
back-to-back send from one origin lands at dispatch + delay + m * tx_time.
"""

from __future__ import annotations

import heapq
import io
import math
import random
from dataclasses import dataclass, field

from .membership import (
    Admission,
    PeerProfile,
    admit,
    handle_departure,
    join_backbone,
    starvation_alerts,
)
from .overlay import MultiSbtOverlay, OverlayError, build_overlay, validate_overlay
from .scenario import LIFETIME_NOTE, ScenarioConfig, truncated_pareto_scale
from .schedule import derive_neighbor_tables

SERVER = -1

EVENT_RANK = {
    "arrival": 0,
    "departure": 1,
    "chunk_emit": 2,
    "transfer_complete": 3,
    "control_msg": 4,
    "pull_request": 5,
    "buffermap_exchange": 6,
}

CONTROL_BYTES = {
    "gossip": 100,
    "request": 100,
    "alert": 100,
    "table_update": 100,
    "bootstrap": 100,
}


def pair_link_delay(seed: int, a: int, b: int, lo: float, hi: float) -> float:
    """Per-pair propagation delay, uniform in [lo, hi], stable across runs
    and across systems sharing a seed (hash-seeded, not draw-order seeded)."""
    if a > b:
        a, b = b, a
    if lo == hi:
        return lo
    return random.Random(f"link:{seed}:{a}:{b}").uniform(lo, hi)


def transfer_time(
    uplink_free_at: float, now: float, tx_time: float, link_delay: float
) -> tuple[float, float]:
    """(uplink release time, arrival time) for one queued send.

    Transmission starts when both the request and the uplink are ready;
    arrival adds the propagation delay to the transmission end, which is
    what makes back-to-back sends arrive one transmission apart.
    """
    tx_end = max(now, uplink_free_at) + tx_time
    return tx_end, tx_end + link_delay


# -- mesh-pull decision step -------------------------------------------------


@dataclass(frozen=True)
class MeshActions:
    buffermaps: tuple[int, ...]  # neighbors to send a buffer map to
    requests: tuple[tuple[int, int], ...]  # (chunk, holder)
    gossip: bool


def pull_mesh_step(
    held: set[int],
    playback_point: int,
    outstanding: dict[int, float],
    now: float,
    head_chunk: int,
    neighbors: dict[int, tuple[set[int], bool]],  # id -> (advertised, servable)
    window: int,
    pipeline: int,
    rng: random.Random,
    gossip_due: bool = False,
) -> MeshActions:
    """One advertisement-period step for a second-tier peer.

    Sends a buffer map to every neighbor, then requests missing chunks in
    the playback window rarest first (ties to the earliest deadline, the
    oldest chunk), skipping holders that cannot serve, such as backbone
    peers with no surplus.
    """
    lo = max(playback_point, head_chunk - window + 1)
    slots = pipeline - sum(1 for t in outstanding.values() if t > now)
    requests: list[tuple[int, int]] = []
    if slots > 0 and head_chunk >= lo:
        missing = [
            c
            for c in range(lo, head_chunk + 1)
            if c not in held and outstanding.get(c, 0.0) <= now
        ]
        holders_of = {
            c: sorted(
                nb for nb, (adv, servable) in neighbors.items() if servable and c in adv
            )
            for c in missing
        }
        missing = [c for c in missing if holders_of[c]]
        missing.sort(key=lambda c: (len(holders_of[c]), c))
        for c in missing[:slots]:
            requests.append((c, rng.choice(holders_of[c])))
    return MeshActions(
        buffermaps=tuple(sorted(neighbors)),
        requests=tuple(requests),
        gossip=gossip_due,
    )


# -- attachable sub-overlays -------------------------------------------------


@dataclass
class SubOverlay:
    """A reduced-rate push structure hanging off one backbone peer.

    sub_snap re-encodes to a fraction of the stream rate, modeled as chunk
    thinning at a stretched transmission time; members inherit the parent's
    receipt time plus their snowball-tree path delay.  sub_opst packetizes
    each chunk and relays sequentially at packet granularity.
    """

    parent: int
    members: tuple[int, ...]
    mode: str  # "sub_snap" | "sub_opst"
    rate_factor: float
    thinning: int
    overlay: MultiSbtOverlay | None
    mean_delay: float
    tx_time: float  # stretched chunk time (sub_snap) or packet time (sub_opst)
    packet_count: int = 1
    chunk_time: float = 0.0

    def carries(self, chunk: int) -> bool:
        return chunk % self.thinning == 0

    def offsets(self, chunk: int) -> dict[int, float]:
        """Per-member delay beyond the parent's receipt for one chunk."""
        if not self.members:
            return {}
        if self.mode == "sub_opst":
            n = len(self.members)
            root = chunk % n
            out = {}
            for j, m in enumerate(self.members):
                rank = (j - root) % n
                if rank == 0:
                    out[m] = self.chunk_time
                else:
                    out[m] = self.chunk_time + self.mean_delay + rank * self.tx_time
            return out
        if self.overlay is None:  # single member, direct relay
            return {self.members[0]: self.mean_delay + self.tx_time}
        tree = self.overlay.tree((chunk // self.thinning) % self.overlay.period)
        out = {}
        for member in self.members:
            level = tree.level_of[member]
            hops = 0
            node = member
            while node in tree.parent:
                node = tree.parent[node]
                hops += 1
            out[member] = hops * self.mean_delay + level * self.tx_time
        return out


def attach_sub_overlay(
    parent: int,
    members: list[int] | tuple[int, ...],
    mode: str,
    *,
    parent_surplus: float,
    stream_rate: float,
    chunk_size: float,
    mean_link_delay: float,
    rate_factor: float = 0.5,
    packet_count: int = 8,
) -> SubOverlay | None:
    """Attach members below a backbone peer; None when there is nobody to attach."""
    members = tuple(members)
    if not members:
        return None
    if mode == "sub_snap":
        needed = rate_factor * stream_rate
    elif mode == "sub_opst":
        needed = stream_rate
    else:
        raise ValueError(f"unknown sub-overlay mode {mode!r}")
    if parent_surplus < needed:
        raise OverlayError(
            f"peer {parent}: surplus {parent_surplus:.0f} bps cannot host a "
            f"{mode} tier needing {needed:.0f} bps"
        )
    chunk_time = chunk_size / stream_rate
    if mode == "sub_opst":
        return SubOverlay(
            parent=parent,
            members=members,
            mode=mode,
            rate_factor=1.0,
            thinning=1,
            overlay=None,
            mean_delay=mean_link_delay,
            tx_time=chunk_time / packet_count,
            packet_count=packet_count,
            chunk_time=chunk_time,
        )
    thinning = max(1, round(1.0 / rate_factor))
    sub = build_overlay(list(members)) if len(members) >= 2 else None
    return SubOverlay(
        parent=parent,
        members=members,
        mode=mode,
        rate_factor=rate_factor,
        thinning=thinning,
        overlay=sub,
        mean_delay=mean_link_delay,
        tx_time=chunk_time / rate_factor,
        chunk_time=chunk_time,
    )


# -- metrics -----------------------------------------------------------------


def percentile(values: list[float], q: float) -> float:
    if not values:
        return float("nan")
    data = sorted(values)
    pos = (len(data) - 1) * q / 100.0
    lo = int(pos)
    hi = min(lo + 1, len(data) - 1)
    frac = pos - lo
    return data[lo] * (1 - frac) + data[hi] * frac


@dataclass
class MetricsReport:
    startup_latency: dict[int, float]
    playback: list[tuple[int, int, float]]  # (chunk, peer, delay)
    control_msgs: dict[str, int]
    control_bytes: dict[str, int]
    data_bytes: float
    unrecovered: int
    window_losses: int
    priority_violations: int
    repair_losses: int
    recovered_pulls: int
    notes: dict[str, str] = field(default_factory=dict)

    @property
    def control_total(self) -> int:
        return sum(self.control_bytes.values())

    def control_overhead(self) -> float:
        total = self.control_total + self.data_bytes
        return self.control_total / total if total else 0.0

    def playback_values(self) -> list[float]:
        return [d for _, _, d in self.playback]

    def max_playback(self) -> float:
        vals = self.playback_values()
        return max(vals) if vals else float("nan")

    def mean_playback(self) -> float:
        vals = self.playback_values()
        return sum(vals) / len(vals) if vals else float("nan")

    def summary_doc(self) -> dict:
        play = self.playback_values()
        start = sorted(self.startup_latency.values())
        quant = lambda vals: {
            f"p{q}": percentile(vals, q) for q in (10, 50, 90, 99)
        }
        return {
            "playback_delay": {
                **quant(play),
                "mean": self.mean_playback(),
                "max": self.max_playback(),
                "count": len(play),
            },
            "startup_latency": {
                **quant(start),
                "mean": sum(start) / len(start) if start else float("nan"),
                "count": len(start),
            },
            "control_overhead": self.control_overhead(),
            "control_messages": dict(sorted(self.control_msgs.items())),
            "control_bytes": dict(sorted(self.control_bytes.items())),
            "data_bytes": self.data_bytes,
            "unrecovered": self.unrecovered,
            "window_losses": self.window_losses,
            "priority_violations": self.priority_violations,
            "repair_losses": self.repair_losses,
            "recovered_pulls": self.recovered_pulls,
            "notes": dict(self.notes),
        }

    def to_csv(self, header_comment: str = "") -> str:
        buf = io.StringIO()
        if header_comment:
            buf.write(f"# {header_comment}\n")
        buf.write("metric,peer_id,chunk_id,value\n")
        for peer in sorted(self.startup_latency):
            buf.write(f"startup_latency,{peer},,{self.startup_latency[peer]:.9g}\n")
        for chunk, peer, delay in sorted(self.playback):
            buf.write(f"playback_delay,{peer},{chunk},{delay:.9g}\n")
        buf.write(f"control_overhead,,,{self.control_overhead():.9g}\n")
        for cat in sorted(self.control_msgs):
            buf.write(f"control_messages_{cat},,,{self.control_msgs[cat]}\n")
        buf.write(f"data_bytes,,,{self.data_bytes:.9g}\n")
        buf.write(f"unrecovered,,,{self.unrecovered}\n")
        buf.write(f"window_losses,,,{self.window_losses}\n")
        return buf.getvalue()


# -- simulation peers --------------------------------------------------------


@dataclass
class SimPeer:
    profile: PeerProfile
    tier: str
    surplus: float
    alive: bool = True
    buffer: dict[int, float] = field(default_factory=dict)
    playback_point: int = 0
    started_at: float | None = None
    neighbors: list[int] = field(default_factory=list)
    outstanding: dict[int, float] = field(default_factory=dict)
    push_free: float = 0.0
    pull_free: float = 0.0
    sub: SubOverlay | None = None  # sub-overlay this peer PARENTS
    sub_member_of: int | None = None
    scan_from: int = 0  # backbone self-check cursor: all chunks below are held
    scanning: bool = False


class StreamSimulation:
    """One seeded run of a streaming scenario.

    mode "snap": push backbone over admitted stable peers, second tier per
    config.  mode "pull_only": everyone pulls in one mesh fed by the server.
    mode "multi_opst": churn-free relay-tree baseline.  mode "backbone":
    churn-free push calibration over a prebuilt overlay.
    """

    def __init__(
        self,
        cfg: ScenarioConfig,
        mode: str | None = None,
        prebuilt_overlay: MultiSbtOverlay | None = None,
        event_log: list | None = None,
    ):
        self.cfg = cfg
        self.mode = mode or cfg.baseline
        self.rng = random.Random(cfg.seed)
        self.tau = cfg.chunk_period
        self.t_push = cfg.chunk_size / cfg.stream_rate
        self.total_chunks = max(1, int(cfg.session_length / self.tau))
        self.heap: list = []
        self.seq = 0
        self.now = 0.0
        self.peers: dict[int, SimPeer] = {}
        self.next_id = 0
        self.overlay: MultiSbtOverlay | None = None
        self.tables = {}
        self.epoch = 0
        self.chunk_meta: dict[int, tuple[float, int, int]] = {}  # emit, epoch, tree
        self.pending_joins: list[int] = []
        self.pending_tier2: list[int] = []
        self.join_batch_scheduled = False
        self.playback: list[tuple[int, int, float]] = []
        self.control_msgs: dict[str, int] = {}
        self.control_bytes: dict[str, int] = {}
        self.data_bytes = 0.0
        self.priority_violations = 0
        self.repair_losses = 0
        self.recovered_pulls = 0
        self.event_log = event_log
        self.opst_order: list[int] = []
        self._server_pull_free = 0.0
        self._lifetime_scale = truncated_pareto_scale(
            cfg.lifetime_model.get("mean", 100.0), cfg.session_length
        )
        self._prebuilt = prebuilt_overlay

    # -- infrastructure ----------------------------------------------------

    def push_event(self, time: float, kind: str, *payload):
        heapq.heappush(self.heap, (time, EVENT_RANK[kind], self.seq, kind, payload))
        self.seq += 1

    def link(self, a: int, b: int) -> float:
        lo, hi = self.cfg.link_delay_range
        return pair_link_delay(self.cfg.seed, a, b, lo, hi)

    def count_control(self, kind: str, n: int = 1, size: int | None = None):
        if size is None:
            size = CONTROL_BYTES.get(kind, 100)
        self.control_msgs[kind] = self.control_msgs.get(kind, 0) + n
        self.control_bytes[kind] = self.control_bytes.get(kind, 0) + n * size

    # -- population --------------------------------------------------------

    def _spawn_profile(self, join_time: float) -> tuple[PeerProfile, float]:
        """Draw one arrival.  The true stability process is independent of
        p2 (fraction p1 of arrivals stay for the whole session); p2 only
        degrades the identifier, so a run's population and lifetimes are
        identical across p2 values under one seed.  Of the labeled-stable
        peers a fraction p2 are false positives that churn; the matching
        stable-but-unlabeled mass keeps the label rate at p1.

        Returns (profile, departure time), with departure beyond the session
        for stayers.  The number of rng draws per arrival is fixed.
        """
        pid = self.next_id
        self.next_id += 1
        p1, p2 = self.cfg.p1, self.cfg.p2
        u_stable = self.rng.random()
        u_label_s = self.rng.random()
        u_label_u = self.rng.random()
        bw = self.rng.choice(self.cfg.upload_bw_choices)
        u_life = self.rng.random()
        truly = u_stable < p1
        if truly:
            labeled = u_label_s < 1.0 - p2
        else:
            rate = p1 * p2 / (1.0 - p1) if p1 < 1.0 else 0.0
            labeled = u_label_u < rate
        profile = PeerProfile(
            id=pid,
            upload_bw=bw,
            labeled_stable=labeled,
            truly_stable=truly,
            join_time=join_time,
        )
        if truly:
            departs = self.cfg.session_length + 1.0
        else:
            departs = join_time + self._lifetime_scale / max(1e-12, 1.0 - u_life)
        return profile, departs

    def _admit(self, profile: PeerProfile, departs: float):
        decision = admit(profile, b_base=self.cfg.stream_rate)
        if self.mode == "pull_only":  # labels gate nothing without a backbone
            decision = Admission(tier="second_tier", surplus=0.0)
        point = math.ceil(profile.join_time / self.tau - 1e-12)
        peer = SimPeer(
            profile=profile,
            tier=decision.tier,
            surplus=decision.surplus,
            playback_point=min(self.total_chunks - 1, max(0, point)),
        )
        self.peers[profile.id] = peer
        if departs < self.cfg.session_length:
            self.push_event(departs, "departure", profile.id)
        if decision.tier == "backbone":
            self.pending_joins.append(profile.id)
        else:
            self.pending_tier2.append(profile.id)

    def _mesh_candidates(self, exclude: int) -> list[int]:
        pool = [p for p, st in self.peers.items() if st.alive and p != exclude]
        if self.mode == "pull_only" or (self.mode == "snap" and self.overlay is None):
            pool.append(SERVER)
        return sorted(pool)

    def _init_mesh_peer(self, pid: int):
        peer = self.peers[pid]
        pool = self._mesh_candidates(pid)
        k = min(self.cfg.mesh_neighbors, len(pool))
        peer.neighbors = self.rng.sample(pool, k) if k else []
        base = self.now if self.now > 0 else 0.0
        self.push_event(base + self.cfg.buffermap_period, "buffermap_exchange", pid)
        self.push_event(base + self.cfg.gossip_period, "control_msg", "gossip", pid)

    # -- backbone management -------------------------------------------------

    def _backbone_members(self) -> list[int]:
        return [
            p
            for p, st in self.peers.items()
            if st.alive and st.tier == "backbone"
        ]

    def _form_or_extend_backbone(self):
        """Apply pending joins as one reshaping."""
        joiners = [p for p in self.pending_joins if self.peers[p].alive]
        self.pending_joins.clear()
        if not joiners:
            return
        if self.overlay is None:
            members = [p for p in self._backbone_members()]
            if len(members) >= 2:
                self.overlay = build_overlay(members)
                self.tables = derive_neighbor_tables(self.overlay, _validate=False)
                self.epoch += 1
                self.count_control("bootstrap", n=len(members))
                self._start_hole_scans()
            return
        updates_total = 0
        for pid in joiners:
            self.overlay, updates = join_backbone(self.overlay, pid)
            updates_total += len(updates)
        self.tables = derive_neighbor_tables(self.overlay, _validate=False)
        self.epoch += 1
        self.count_control("table_update", n=max(1, updates_total))
        self._start_hole_scans()

    def _schedule_join_batch(self):
        if self.join_batch_scheduled or not self.pending_joins:
            return
        period = self.overlay.period if self.overlay is not None else 1
        batch_span = max(self.tau, period * self.tau)
        at = (int(self.now / batch_span) + 1) * batch_span
        self.join_batch_scheduled = True
        self.push_event(at, "control_msg", "join_batch")

    def _start_hole_scans(self):
        """Arm the periodic self-check on every backbone overlay member."""
        if self.overlay is None:
            return
        for pid in self.overlay.peers:
            peer = self.peers.get(pid)
            if peer is None or not peer.alive or peer.scanning:
                continue
            peer.scanning = True
            peer.scan_from = max(peer.scan_from, peer.playback_point)
            self.push_event(self.now + 2 * self.tau, "control_msg", "hole_scan", pid)

    def _attach_tier2(self):
        """Place pending second-tier peers: mesh neighbors or a sub-overlay."""
        pending = [p for p in self.pending_tier2 if self.peers[p].alive]
        self.pending_tier2.clear()
        if self.mode == "pull_only" or self.cfg.tier2_mode == "pull_mesh":
            for pid in pending:
                self._init_mesh_peer(pid)
            return
        # sub_snap / sub_opst: group under surplus backbone parents
        needed = (
            self.cfg.sub_rate_factor * self.cfg.stream_rate
            if self.cfg.tier2_mode == "sub_snap"
            else self.cfg.stream_rate
        )
        for pid in pending:
            host = None
            for parent in sorted(self._backbone_members()):
                st = self.peers[parent]
                group = list(st.sub.members) if st.sub else []
                if st.surplus >= needed and len(group) < self.cfg.sub_group_size:
                    host = parent
                    break
            if host is None:
                self._init_mesh_peer(pid)  # no capacity: fall back to pulling
                continue
            st = self.peers[host]
            members = (list(st.sub.members) if st.sub else []) + [pid]
            st.sub = attach_sub_overlay(
                host,
                members,
                self.cfg.tier2_mode,
                parent_surplus=st.surplus,
                stream_rate=self.cfg.stream_rate,
                chunk_size=self.cfg.chunk_size,
                mean_link_delay=self.cfg.delay_mean,
                rate_factor=self.cfg.sub_rate_factor,
                packet_count=self.cfg.sub_packet_count,
            )
            self.peers[pid].sub_member_of = host
            self.count_control("table_update")

    # -- delivery ------------------------------------------------------------

    def deliver(self, pid: int, chunk: int, time: float):
        peer = self.peers.get(pid)
        if peer is None or not peer.alive or chunk in peer.buffer:
            return
        peer.buffer[chunk] = time
        peer.outstanding.pop(chunk, None)
        emit, epoch, tree_idx = self.chunk_meta[chunk]
        self.playback.append((chunk, pid, time - emit))
        if peer.started_at is None and chunk >= peer.playback_point:
            peer.started_at = time - peer.profile.join_time
        if (
            peer.tier == "backbone"
            and epoch == self.epoch
            and self.tables
            and pid in self.tables
        ):
            for child in self.tables[pid].children_for_tree(tree_idx):
                self._send_push(pid, child, chunk, time)
        if peer.sub is not None and peer.sub.carries(chunk):
            size = self.cfg.chunk_size * peer.sub.rate_factor
            for member, offset in peer.sub.offsets(chunk).items():
                if self.peers[member].alive:
                    self.data_bytes += size / 8
                    self.push_event(time + offset, "transfer_complete", member, chunk)

    def _send_push(self, origin: int, dest: int, chunk: int, now: float):
        o = self.peers[origin]
        tx_end, arrival = transfer_time(o.push_free, now, self.t_push, self.link(origin, dest))
        o.push_free = tx_end
        self.data_bytes += self.cfg.chunk_size / 8
        self.push_event(arrival, "transfer_complete", dest, chunk)

    # -- event handlers --------------------------------------------------------

    def _on_chunk_emit(self, chunk: int):
        period = self.overlay.period if self.overlay is not None else 1
        tree_idx = chunk % period
        self.chunk_meta[chunk] = (self.now, self.epoch, tree_idx)
        if self.mode == "multi_opst":
            root = self.opst_order[chunk % len(self.opst_order)]
            self.data_bytes += self.cfg.chunk_size / 8
            self.push_event(self.now + self.t_push, "transfer_complete", root, chunk)
            return
        if self.mode == "pull_only" or self.overlay is None:
            backbone = self._backbone_members()
            if self.mode != "pull_only" and backbone:
                for pid in backbone:  # degenerate sub-2-peer backbone
                    self.data_bytes += self.cfg.chunk_size / 8
                    self.deliver(pid, chunk, self.now)
            return
        root = self.overlay.tree(tree_idx).root
        self.data_bytes += self.cfg.chunk_size / 8
        self.deliver(root, chunk, self.now)

    def _on_transfer_complete(self, dest: int, chunk: int):
        if self.mode == "multi_opst":
            peer = self.peers[dest]
            if chunk in peer.buffer:
                return
            emit, _, _ = self.chunk_meta[chunk]
            peer.buffer[chunk] = self.now
            self.playback.append((chunk, dest, self.now - emit))
            order = self.opst_order
            n = len(order)
            if order[chunk % n] == dest:  # this peer roots the chunk's tree
                idx = chunk % n
                recv = self.now
                for j in range(1, n):
                    target = order[(idx + j) % n]
                    tx_end, arrival = transfer_time(
                        peer.push_free, recv, self.t_push, self.link(dest, target)
                    )
                    peer.push_free = tx_end
                    self.data_bytes += self.cfg.chunk_size / 8
                    self.push_event(arrival, "transfer_complete", target, chunk)
            return
        self.deliver(dest, chunk, self.now)

    def _on_arrival(self):
        if self.next_id < self.cfg.max_peers:
            profile, departs = self._spawn_profile(self.now)
            self._admit(profile, departs)
            self._schedule_join_batch()
            self._attach_tier2()
            gap = self.rng.expovariate(self.cfg.arrival_rate)
            if self.now + gap < self.cfg.session_length:
                self.push_event(self.now + gap, "arrival")

    def _on_departure(self, pid: int):
        peer = self.peers[pid]
        if not peer.alive:
            return
        peer.alive = False
        if peer.sub_member_of is not None:
            host = self.peers.get(peer.sub_member_of)
            if host is not None and host.sub is not None:
                remaining = [m for m in host.sub.members if m != pid]
                host.sub = (
                    attach_sub_overlay(
                        host.profile.id,
                        remaining,
                        self.cfg.tier2_mode,
                        parent_surplus=host.surplus,
                        stream_rate=self.cfg.stream_rate,
                        chunk_size=self.cfg.chunk_size,
                        mean_link_delay=self.cfg.delay_mean,
                        rate_factor=self.cfg.sub_rate_factor,
                        packet_count=self.cfg.sub_packet_count,
                    )
                    if remaining
                    else None
                )
        if (
            peer.tier == "backbone"
            and self.overlay is not None
            and pid in self.overlay.peers
        ):
            alerts = starvation_alerts(self.overlay, pid)
            self.count_control("alert", n=sum(len(v) for v in alerts.values()) or 1)
            self.repair_losses += 1
            if self.overlay.peer_count - 1 >= 2:
                plan = handle_departure(self.overlay, pid)
                self.overlay = plan.overlay
                self.tables = derive_neighbor_tables(self.overlay, _validate=False)
                self.count_control("table_update", n=max(1, len(plan.table_updates)))
            else:
                self.overlay = None
                self.tables = {}
            self.epoch += 1
            self._start_hole_scans()
            # orphaned sub-overlay members fall back to the mesh at once
            if peer.sub is not None:
                for member in peer.sub.members:
                    if self.peers[member].alive:
                        self.peers[member].sub_member_of = None
                        self._init_mesh_peer(member)
                peer.sub = None

    def _on_gossip(self, pid: int):
        peer = self.peers[pid]
        if not peer.alive:
            return
        self.count_control("gossip", n=max(1, len(peer.neighbors)))
        dead = [nb for nb in peer.neighbors if nb != SERVER and not self.peers[nb].alive]
        if dead:
            pool = [
                c for c in self._mesh_candidates(pid) if c not in peer.neighbors
            ]
            for nb in dead:
                peer.neighbors.remove(nb)
                if pool:
                    pick = self.rng.choice(pool)
                    pool.remove(pick)
                    peer.neighbors.append(pick)
        nxt = self.now + self.cfg.gossip_period
        if nxt < self.cfg.session_length:
            self.push_event(nxt, "control_msg", "gossip", pid)

    def _head_chunk(self) -> int:
        return min(self.total_chunks - 1, int(self.now / self.tau))

    def _on_buffermap(self, pid: int):
        peer = self.peers[pid]
        if not peer.alive:
            return
        neighbors: dict[int, tuple[set[int], bool]] = {}
        for nb in peer.neighbors:
            if nb == SERVER:
                neighbors[nb] = (set(range(self._head_chunk() + 1)), True)
                continue
            st = self.peers[nb]
            if not st.alive:
                continue
            servable = st.tier != "backbone" or st.surplus > 0
            neighbors[nb] = (set(st.buffer), servable)
        actions = pull_mesh_step(
            held=set(peer.buffer),
            playback_point=peer.playback_point,
            outstanding=peer.outstanding,
            now=self.now,
            head_chunk=self._head_chunk(),
            neighbors=neighbors,
            window=self.cfg.playback_window,
            pipeline=self.cfg.pull_pipeline,
            rng=self.rng,
        )
        n_maps = len(actions.buffermaps)
        backbone_feeds = sum(
            1 for nb in actions.buffermaps if nb == SERVER or self.peers[nb].tier == "backbone"
        )
        self.count_control(
            "buffermap",
            n=n_maps + backbone_feeds,
            size=2 * self.cfg.playback_window,
        )
        for chunk, holder in actions.requests:
            peer.outstanding[chunk] = self.now + self.cfg.request_timeout
            self.count_control("request")
            at = self.now + (self.link(pid, holder) if holder != SERVER else self.cfg.delay_mean)
            self.push_event(at, "pull_request", holder, pid, chunk)
        nxt = self.now + self.cfg.buffermap_period
        if nxt < self.cfg.session_length:
            self.push_event(nxt, "buffermap_exchange", pid)

    def _on_pull_request(self, holder: int, requester: int, chunk: int):
        req = self.peers.get(requester)
        if req is None or not req.alive or chunk in req.buffer:
            return
        if holder == SERVER:
            rate = self.cfg.server_bw
            free = self._server_pull_free
            dur = self.cfg.chunk_size / rate
            if free - self.now > 3 * self.tau:
                return
            tx_end, arrival = transfer_time(free, self.now, dur, self.cfg.delay_mean)
            self._server_pull_free = tx_end
            self.data_bytes += self.cfg.chunk_size / 8
            self.push_event(arrival, "transfer_complete", requester, chunk)
            return
        st = self.peers.get(holder)
        if st is None or not st.alive or chunk not in st.buffer:
            return
        if st.tier == "backbone":
            if st.surplus <= 0 or st.push_free > self.now:
                return  # push priority: never serve pulls over a push backlog
            rate = st.surplus
        else:
            rate = st.profile.upload_bw
        dur = self.cfg.chunk_size / rate
        if st.pull_free - self.now > 3 * self.tau:
            return  # saturated; requester retries elsewhere
        if st.tier == "backbone" and st.push_free > self.now:  # defensive audit
            self.priority_violations += 1
        tx_end, arrival = transfer_time(st.pull_free, self.now, dur, self.link(holder, requester))
        st.pull_free = tx_end
        self.data_bytes += self.cfg.chunk_size / 8
        if self.chunk_meta[chunk][1] != self.epoch:
            self.recovered_pulls += 1
        self.push_event(arrival, "transfer_complete", requester, chunk)

    def _on_hole_scan(self, pid: int):
        """Backbone self-repair: pull chunks the push flow failed to deliver
        (losses during reshaping, or the backlog between arrival and the
        join batch).  Reschedules itself while the peer stays backbone."""
        peer = self.peers.get(pid)
        if peer is None or not peer.alive:
            return
        depth = self.overlay.depth if self.overlay is not None else 2
        hi = self._head_chunk() - depth - 1  # leave in-flight chunks alone
        while peer.scan_from <= hi and peer.scan_from in peer.buffer:
            peer.scan_from += 1
        missing = [
            c
            for c in range(peer.scan_from, hi + 1)
            if c not in peer.buffer and peer.outstanding.get(c, 0.0) <= self.now
        ]
        if missing:
            holders_pool = [
                h
                for h in (self.overlay.peers if self.overlay is not None else [])
                if h != pid and self.peers[h].alive
            ]
            for chunk in missing[: self.cfg.pull_pipeline]:
                holders = sorted(
                    h for h in holders_pool if chunk in self.peers[h].buffer
                )
                if not holders:
                    continue
                holder = self.rng.choice(holders)
                peer.outstanding[chunk] = self.now + self.cfg.request_timeout
                self.count_control("request")
                self.push_event(
                    self.now + self.link(pid, holder), "pull_request", holder, pid, chunk
                )
        if peer.tier == "backbone":
            nxt = self.now + 2 * self.tau
            if nxt < self.cfg.session_length + 5 * self.tau:
                self.push_event(nxt, "control_msg", "hole_scan", pid)
            else:
                peer.scanning = False
        else:
            peer.scanning = False

    # -- run -------------------------------------------------------------------

    def run(self) -> MetricsReport:
        cfg = self.cfg
        if self.mode == "multi_opst":
            if cfg.arrival_rate > 0:
                raise OverlayError("the relay-tree baseline runs churn-free")
            for _ in range(cfg.initial_peers):
                profile, _ = self._spawn_profile(0.0)
                self.peers[profile.id] = SimPeer(
                    profile=profile, tier="backbone", surplus=0.0
                )
            self.opst_order = sorted(self.peers)
        elif self.mode == "backbone":
            overlay = self._prebuilt
            if overlay is None:
                raise OverlayError("backbone calibration needs a prebuilt overlay")
            report = validate_overlay(overlay)
            if not report.ok:
                raise OverlayError(f"overlay invalid:\n{report}")
            self.overlay = overlay
            self.tables = derive_neighbor_tables(overlay, _validate=False)
            for pid in overlay.peers:
                profile = PeerProfile(
                    id=pid,
                    upload_bw=cfg.stream_rate,
                    labeled_stable=True,
                    truly_stable=True,
                    join_time=0.0,
                )
                self.peers[pid] = SimPeer(profile=profile, tier="backbone", surplus=0.0)
            self.next_id = max(overlay.peers) + 1
        else:
            for _ in range(cfg.initial_peers):
                profile, departs = self._spawn_profile(0.0)
                self._admit(profile, departs)
            if self.mode == "snap":
                self._form_or_extend_backbone()
            else:  # pull_only keeps everyone in the mesh
                for pid in list(self.peers):
                    self.peers[pid].tier = "second_tier"
                self.pending_joins.clear()
                self.pending_tier2 = list(self.peers)
            self._attach_tier2()
            if cfg.arrival_rate > 0:
                gap = self.rng.expovariate(cfg.arrival_rate)
                if gap < cfg.session_length:
                    self.push_event(gap, "arrival")
        for c in range(self.total_chunks):
            self.push_event(c * self.tau, "chunk_emit", c)
        horizon = cfg.session_length + max(30 * self.tau, 10.0)
        while self.heap:
            time, _, _, kind, payload = heapq.heappop(self.heap)
            if time > horizon:
                break
            self.now = time
            if self.event_log is not None:
                self.event_log.append((round(time, 9), kind, payload))
            if kind == "chunk_emit":
                self._on_chunk_emit(*payload)
            elif kind == "transfer_complete":
                self._on_transfer_complete(*payload)
            elif kind == "arrival":
                self._on_arrival()
            elif kind == "departure":
                self._on_departure(*payload)
            elif kind == "buffermap_exchange":
                self._on_buffermap(*payload)
            elif kind == "pull_request":
                self._on_pull_request(*payload)
            elif kind == "control_msg":
                sub = payload[0]
                if sub == "gossip":
                    self._on_gossip(payload[1])
                elif sub == "join_batch":
                    self.join_batch_scheduled = False
                    self._form_or_extend_backbone()
                    self._attach_tier2()
                elif sub == "hole_scan":
                    self._on_hole_scan(payload[1])
        return self._report()

    def _report(self) -> MetricsReport:
        grace = max(10, self.cfg.playback_window // 2)
        last_counted = self.total_chunks - 1 - grace
        unrecovered = 0  # backbone holes: these would be silent losses
        window_losses = 0  # mesh chunks that slid out of the playback window
        for pid, peer in self.peers.items():
            if not peer.alive:
                continue
            thin = 1
            if peer.sub_member_of is not None:
                host = self.peers[peer.sub_member_of]
                thin = host.sub.thinning if host.sub else 1
            backbone = peer.tier == "backbone" and (
                self.overlay is not None and pid in self.overlay.peers
            )
            for c in range(peer.playback_point, last_counted + 1):
                if c % thin == 0 and c not in peer.buffer:
                    if backbone:
                        unrecovered += 1
                    else:
                        window_losses += 1
        startup = {
            pid: peer.started_at
            for pid, peer in self.peers.items()
            if peer.started_at is not None
        }
        return MetricsReport(
            startup_latency=startup,
            playback=self.playback,
            control_msgs=self.control_msgs,
            control_bytes=self.control_bytes,
            data_bytes=self.data_bytes,
            unrecovered=unrecovered,
            window_losses=window_losses,
            priority_violations=self.priority_violations,
            repair_losses=self.repair_losses,
            recovered_pulls=self.recovered_pulls,
            notes={"lifetime_model": LIFETIME_NOTE},
        )


# -- entry points ------------------------------------------------------------


def run_backbone_sim(
    overlay: MultiSbtOverlay, cfg: ScenarioConfig, event_log: list | None = None
) -> MetricsReport:
    """Churn-free push calibration over a prebuilt overlay."""
    sim = StreamSimulation(cfg, mode="backbone", prebuilt_overlay=overlay, event_log=event_log)
    return sim.run()


def run_hybrid_sim(cfg: ScenarioConfig, event_log: list | None = None) -> MetricsReport:
    """Full lifecycle: arrivals, labeling, admission, churn, second tier."""
    mode = "pull_only" if cfg.baseline == "pull_only" else "snap"
    sim = StreamSimulation(cfg, mode=mode, event_log=event_log)
    return sim.run()


def run_baseline_multi_opst(cfg: ScenarioConfig, event_log: list | None = None) -> MetricsReport:
    """Churn-free relay-tree baseline: every peer roots one tree and relays
    incoming chunks to all others sequentially."""
    sim = StreamSimulation(cfg, mode="multi_opst", event_log=event_log)
    return sim.run()


def run_scenario(cfg: ScenarioConfig, event_log: list | None = None) -> MetricsReport:
    if cfg.baseline == "multi_opst":
        return run_baseline_multi_opst(cfg, event_log)
    return run_hybrid_sim(cfg, event_log)
