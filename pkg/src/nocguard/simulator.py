"""Cycle-stepped flit-level NoC simulator.

Router model: single-stage, input-buffered wormhole switching with
credit-style backpressure (a flit advances only if the downstream input
buffer has a free slot at the start of the cycle), round-robin arbitration
per output port, and dimension-ordered X->Y->Z routing. 3D meshes share one
vertical path per (x, y) column, arbitrated round-robin among layers.

Per-router probes record inbound/outbound flit events at the local port and
convert them to 8-bit saturating inter-flit delays.
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import rng
from .errors import ConfigError, IOFormatError, ScenarioError
from .topology import MESH3D, Topology

# Packet kinds
REQ, RESP, ATK, DATA = 0, 1, 2, 3

# Port/direction indices: 0 = local, then +x, -x, +y, -y, +z, -z
LOCAL = 0
_OPP = (0, 2, 1, 4, 3, 6, 5)

STARVE_THRESHOLD = 20   # cycles a flit may wait at a buffer head before counting as starved
MC_SERVICE_LATENCY = 8  # cycles between consuming a request and emitting the response
MC_RX_CAP = 4           # requests an MC queues before backpressuring the network
RESP_FLITS = 5          # head + 3 body + tail
DEST_POLICIES = ("nearest-mc", "random-mc", "uniform-random", "hotspot")


@dataclass(frozen=True)
class BenignProfile:
    name: str
    per_node_rate: float
    destination_policy: str
    burst_on: int = 0    # 0 = no duty cycling
    burst_off: int = 0
    hotspot_node: int = -1

    def validate(self):
        if not 0.0 <= self.per_node_rate <= 1.0:
            raise ConfigError(f"per_node_rate must be in [0,1], got {self.per_node_rate}")
        if self.destination_policy not in DEST_POLICIES and self.destination_policy != "mixed":
            raise ConfigError(f"unknown destination policy {self.destination_policy!r}")


# Seven synthetic workload profiles standing in for benchmark traces. The
# memory-bound profiles are kept well below corner-link capacity (16
# requesters * rate * 5 response flits <= ~0.5 flit/cycle) so that benign
# memory traffic stays clearly lighter than a flooding injector.
_PROFILE_TABLE = {
    "uniform-low": ("uniform-random", 0.005, 0, 0),
    "uniform-high": ("uniform-random", 0.030, 0, 0),
    "nearest-mc": ("nearest-mc", 0.004, 0, 0),
    "random-mc": ("random-mc", 0.004, 0, 0),
    "hotspot": ("hotspot", 0.002, 0, 0),
    "bursty": ("random-mc", 0.010, 100, 200),
    "mixed": ("mixed", 0.004, 0, 0),
}
PROFILE_NAMES = tuple(_PROFILE_TABLE)


def benign_profile(name: str, topo: Topology) -> BenignProfile:
    """Look up one of the seven named synthetic workload profiles."""
    if name not in _PROFILE_TABLE:
        raise ConfigError(f"unknown profile {name!r}; choose from {PROFILE_NAMES}")
    policy, rate, on, off = _PROFILE_TABLE[name]
    hot = -1
    if policy == "hotspot":
        # the hot memory channel; fixed per topology
        hot = topo.mc_nodes[-1]
    return BenignProfile(name, rate, policy, on, off, hot)


@dataclass(frozen=True)
class AttackConfig:
    mips: tuple          # malicious IP node ids
    vips: tuple          # victim node ids, must be memory controllers
    pir: float           # per-cycle injection probability per MIP
    start_cycle: int = 0

    def validate(self, topo: Topology):
        mc = set(topo.mc_nodes)
        if not self.mips:
            raise ScenarioError("attack requires at least one MIP")
        if set(self.mips) & set(self.vips):
            raise ScenarioError("MIP and VIP sets must be disjoint")
        for m in self.mips:
            if m in mc:
                raise ScenarioError(f"node {m} is a memory controller and cannot be a MIP")
            if not 0 <= m < topo.num_nodes:
                raise ScenarioError(f"MIP id {m} out of range")
        for v in self.vips:
            if v not in mc:
                raise ScenarioError(f"VIP {v} is not a memory controller")
        if not 0.0 <= self.pir <= 1.0:
            raise ScenarioError(f"pir must be in [0,1], got {self.pir}")


@dataclass(frozen=True)
class SimConfig:
    topology: Topology
    duration: int
    benign_profile: BenignProfile
    attack: Optional[AttackConfig] = None
    buffer_depth: int = 4
    seed: int = 0

    def validate(self):
        if self.duration <= 0:
            raise ConfigError(f"duration must be positive, got {self.duration}")
        if self.buffer_depth < 1:
            raise ConfigError(f"buffer_depth must be >= 1, got {self.buffer_depth}")
        self.benign_profile.validate()
        if self.attack is not None:
            self.attack.validate(self.topology)


@dataclass(frozen=True)
class StarvationStats:
    starved_flits: int
    injected_flits: int
    ejected_flits: int


@dataclass
class TraceSet:
    """Per-router inter-flit-delay arrays for one observation window."""
    num_nodes: int
    duration: int
    iifd: list                    # per node: np.uint8 array of inbound delays
    oifd: list                    # per node: np.uint8 array of outbound delays
    stats: StarvationStats
    per_node_injected: np.ndarray
    per_node_ejected: np.ndarray
    in_flight_end: int
    topo_digest: bytes
    attack: Optional[AttackConfig] = None


class _Engine:
    """One simulation instance; single-threaded mutable state."""

    def __init__(self, cfg: SimConfig):
        cfg.validate()
        self.cfg = cfg
        topo = cfg.topology
        self.topo = topo
        n = topo.num_nodes
        self.n_ports = 7 if topo.kind == MESH3D else 5
        self.xs = [c[0] for c in topo.coords]
        self.ys = [c[1] for c in topo.coords]
        self.zs = [c[2] for c in topo.coords]
        side = topo.n
        # neighbor[node][dir] -> node id or -1
        self.nb = []
        for i in range(n):
            x, y, z = topo.coords[i]
            row = [-1] * 7
            if x < side - 1:
                row[1] = i + 1
            if x > 0:
                row[2] = i - 1
            if y < side - 1:
                row[3] = i + side
            if y > 0:
                row[4] = i - side
            if topo.kind == MESH3D:
                if z < side - 1:
                    row[5] = i + side * side
                if z > 0:
                    row[6] = i - side * side
            self.nb.append(row)

        self.in_buf = [[deque() for _ in range(self.n_ports)] for _ in range(n)]
        self.out_lock = [[-1] * self.n_ports for _ in range(n)]
        self.rr = [[0] * self.n_ports for _ in range(n)]
        self.wait = [[0] * self.n_ports for _ in range(n)]
        self.src_queue = [deque() for _ in range(n)]
        self.mc_set = frozenset(topo.mc_nodes)
        self.mc_rx = {m: deque() for m in topo.mc_nodes}
        self.mc_pend = {m: deque() for m in topo.mc_nodes}
        self.col_rr = {}

        self.active = set()
        self.src_active = set()
        self.buf_total = 0
        self.total_injected = 0
        self.total_ejected = 0
        self.inj_count = np.zeros(n, dtype=np.int64)
        self.ej_count = np.zeros(n, dtype=np.int64)
        self.in_events = [[] for _ in range(n)]
        self.out_events = [[] for _ in range(n)]
        self.starve_cycles = []
        self.cycle = 0
        self._nearest_mc = [
            min(topo.mc_nodes, key=lambda m: self._dist(i, m)) for i in range(n)
        ]
        self._non_mc = [i for i in range(n) if i not in self.mc_set]

    def _dist(self, a, b):
        return (abs(self.xs[a] - self.xs[b]) + abs(self.ys[a] - self.ys[b])
                + abs(self.zs[a] - self.zs[b]))

    def _route_dir(self, node, dst):
        if dst == node:
            return LOCAL
        dx = self.xs[dst] - self.xs[node]
        if dx:
            return 1 if dx > 0 else 2
        dy = self.ys[dst] - self.ys[node]
        if dy:
            return 3 if dy > 0 else 4
        return 5 if self.zs[dst] > self.zs[node] else 6

    # -- traffic pre-generation ------------------------------------------

    def _benign_dest(self, node, cyc, policy, prof):
        seed = self.cfg.seed
        if policy == "nearest-mc":
            return self._nearest_mc[node]
        if policy == "random-mc":
            return rng.choice(self.topo.mc_nodes, seed, node, cyc, 11)
        if policy == "hotspot":
            # hot memory channel: most requests pile onto one MC
            if rng.uniform(seed, node, cyc, 15) < 0.75:
                return prof.hotspot_node
            return rng.choice(self.topo.mc_nodes, seed, node, cyc, 11)
        # uniform-random over non-MC nodes excluding self
        cands = self._non_mc
        d = rng.choice(cands, seed, node, cyc, 12)
        if d == node:
            d = cands[(cands.index(d) + 1) % len(cands)]
        return d

    def _pregenerate(self, total_cycles):
        """Build per-cycle packet source lists from counter-based hashes."""
        cfg = self.cfg
        prof = cfg.benign_profile
        n = self.topo.num_nodes
        gen = [[] for _ in range(total_cycles)]

        node_ids = np.arange(n, dtype=np.uint64)
        u = rng.grid_uniform(cfg.seed, total_cycles, node_ids, 1)
        fire = u < prof.per_node_rate
        for m in self.mc_set:
            fire[:, m] = False
        if prof.burst_on > 0:
            period = prof.burst_on + prof.burst_off
            offs = np.array([rng.hash64(cfg.seed, i, 13) % period for i in range(n)])
            phase = (np.arange(total_cycles)[:, None] + offs[None, :]) % period
            fire &= phase < prof.burst_on
        cycs, nodes = np.nonzero(fire)
        for c, nd in zip(cycs.tolist(), nodes.tolist()):
            policy = prof.destination_policy
            if policy == "mixed":
                policy = "nearest-mc" if rng.hash64(cfg.seed, nd, 14) % 2 else "uniform-random"
            dst = self._benign_dest(nd, c, policy, prof)
            kind = REQ if dst in self.mc_set else DATA
            gen[c].append((nd, dst, kind))

        atk = cfg.attack
        if atk is not None:
            mip_ids = np.array(atk.mips, dtype=np.uint64)
            ua = rng.grid_uniform(cfg.seed, total_cycles, mip_ids, 2)
            ua[:atk.start_cycle, :] = 1.0
            firea = ua < atk.pir
            cycs, idxs = np.nonzero(firea)
            for c, k in zip(cycs.tolist(), idxs.tolist()):
                vip = atk.vips[k % len(atk.vips)]
                gen[c].append((atk.mips[k], vip, ATK))
        return gen

    # -- main loop --------------------------------------------------------

    def run(self, total_cycles, drain_cycles=0, check_conservation=False):
        gen = self._pregenerate(total_cycles)
        depth = self.cfg.buffer_depth
        n_ports = self.n_ports
        in_buf, out_lock, rr, wait = self.in_buf, self.out_lock, self.rr, self.wait
        nb, mc_set = self.nb, self.mc_set
        is3d = n_ports == 7
        moved = set()

        for cyc in range(total_cycles + drain_cycles):
            self.cycle = cyc
            moves = []
            vert = {}
            reserved = {}
            for node in sorted(self.active):
                bufs = in_buf[node]
                reqs = {}
                for p in range(n_ports):
                    q = bufs[p]
                    if q:
                        o = self._route_dir(node, q[0][0])
                        reqs.setdefault(o, []).append(p)
                for o, plist in reqs.items():
                    lock = out_lock[node][o]
                    if lock >= 0:
                        if lock not in plist:
                            continue
                        p = lock
                    elif len(plist) == 1:
                        p = plist[0]
                    else:
                        r = rr[node][o]
                        p = min(plist, key=lambda q_: (q_ - r) % n_ports)
                    if o == LOCAL:
                        # a full MC request queue blocks ejection, backing
                        # requests up into the network (tree saturation)
                        if node in mc_set and bufs[p][0][2] != RESP:
                            if len(self.mc_rx[node]) >= MC_RX_CAP:
                                continue
                        moves.append((node, p, o, -1, -1))
                    elif is3d and o >= 5:
                        col = (self.xs[node], self.ys[node])
                        vert.setdefault(col, []).append((node, p, o))
                    else:
                        dst_node = nb[node][o]
                        ip = _OPP[o]
                        key = dst_node * 8 + ip
                        if len(in_buf[dst_node][ip]) + reserved.get(key, 0) < depth:
                            reserved[key] = reserved.get(key, 0) + 1
                            moves.append((node, p, o, dst_node, ip))
            # one vertical transfer per column per cycle, round-robin
            for col, cands in vert.items():
                last = self.col_rr.get(col, 0)
                cands.sort(key=lambda t: (t[0] * 8 + t[2] - last) % (1 << 20))
                for node, p, o in cands:
                    dst_node = nb[node][o]
                    ip = _OPP[o]
                    key = dst_node * 8 + ip
                    if len(in_buf[dst_node][ip]) + reserved.get(key, 0) < depth:
                        reserved[key] = reserved.get(key, 0) + 1
                        moves.append((node, p, o, dst_node, ip))
                        self.col_rr[col] = node * 8 + o + 1
                        break

            moved.clear()
            for node, p, o, dst_node, ip in moves:
                q = in_buf[node][p]
                flit = q.popleft()
                self.buf_total -= 1
                moved.add(node * 8 + p)
                wait[node][p] = 0
                dst, src, kind, is_head, is_tail = flit
                if is_tail:
                    out_lock[node][o] = -1
                elif is_head:
                    out_lock[node][o] = p
                rr[node][o] = (p + 1) % n_ports
                if o == LOCAL:
                    self.in_events[node].append(cyc)
                    self.ej_count[node] += 1
                    self.total_ejected += 1
                    if node in mc_set and is_head and kind in (REQ, ATK):
                        self.mc_rx[node].append(src)
                else:
                    in_buf[dst_node][ip].append(flit)
                    self.buf_total += 1
                    self.active.add(dst_node)

            # head-of-line starvation accounting and active-set upkeep
            for node in list(self.active):
                bufs = in_buf[node]
                nonempty = False
                for p in range(n_ports):
                    if bufs[p]:
                        nonempty = True
                        if node * 8 + p not in moved:
                            w = wait[node][p] + 1
                            wait[node][p] = w
                            if w == STARVE_THRESHOLD + 1:
                                self.starve_cycles.append(cyc)
                        else:
                            wait[node][p] = 0
                    else:
                        wait[node][p] = 0
                if not nonempty:
                    self.active.discard(node)

            # memory controllers: consume one request/cycle, respond later
            for m in self.mc_rx:
                rx = self.mc_rx[m]
                # serve a new request only once the previous response has
                # mostly drained into the network
                if rx and len(self.src_queue[m]) < RESP_FLITS:
                    self.mc_pend[m].append((cyc + MC_SERVICE_LATENCY, rx.popleft()))
                pend = self.mc_pend[m]
                while pend and pend[0][0] <= cyc:
                    _, requester = pend.popleft()
                    sq = self.src_queue[m]
                    for fi in range(RESP_FLITS):
                        sq.append((requester, m, RESP, fi == 0, fi == RESP_FLITS - 1))
                    self.src_active.add(m)

            # new packets, then NI -> router injection (one flit/cycle/node)
            if cyc < total_cycles:
                for node, dst, kind in gen[cyc]:
                    self.src_queue[node].append((dst, node, kind, True, True))
                    self.src_active.add(node)
            for node in sorted(self.src_active):
                sq = self.src_queue[node]
                if sq and len(in_buf[node][LOCAL]) < depth:
                    in_buf[node][LOCAL].append(sq.popleft())
                    self.buf_total += 1
                    self.out_events[node].append(cyc)
                    self.inj_count[node] += 1
                    self.total_injected += 1
                    self.active.add(node)
                if not sq:
                    self.src_active.discard(node)

            if check_conservation:
                assert self.total_injected == self.total_ejected + self.buf_total, (
                    f"conservation violated at cycle {cyc}")
        return self


def _events_to_deltas(events, w_start, w_end):
    out = []
    prev = w_start
    for e in events:
        if e < w_start:
            continue
        if e >= w_end:
            break
        out.append(min(e - prev, 255))
        prev = e
    return np.asarray(out, dtype=np.uint8)


def _window_traceset(eng: _Engine, w_start, w_end, in_flight_end) -> TraceSet:
    n = eng.topo.num_nodes
    iifd = [_events_to_deltas(eng.in_events[j], w_start, w_end) for j in range(n)]
    oifd = [_events_to_deltas(eng.out_events[j], w_start, w_end) for j in range(n)]
    inj = np.array([sum(1 for e in eng.out_events[j] if w_start <= e < w_end)
                    for j in range(n)], dtype=np.int64)
    ej = np.array([sum(1 for e in eng.in_events[j] if w_start <= e < w_end)
                   for j in range(n)], dtype=np.int64)
    starved = sum(1 for c in eng.starve_cycles if w_start <= c < w_end)
    stats = StarvationStats(starved, int(inj.sum()), int(ej.sum()))
    return TraceSet(n, w_end - w_start, iifd, oifd, stats, inj, ej,
                    in_flight_end, eng.topo.digest(), eng.cfg.attack)


def run_scenario(cfg: SimConfig, drain_cycles=0, check_conservation=False) -> TraceSet:
    """Run one scenario and return its trace window [0, duration)."""
    eng = _Engine(cfg).run(cfg.duration, drain_cycles, check_conservation)
    # with a drain tail the observation window covers the tail too, so
    # ejections during the drain stay on the books
    return _window_traceset(eng, 0, cfg.duration + drain_cycles, eng.buf_total)


def run_scenario_windows(cfg: SimConfig, n_windows: int) -> list:
    """Run one long scenario and split it into consecutive equal windows."""
    eng = _Engine(cfg).run(cfg.duration * n_windows)
    out = []
    for w in range(n_windows):
        lo, hi = w * cfg.duration, (w + 1) * cfg.duration
        cum_inj = sum(sum(1 for e in ev if e < hi) for ev in eng.out_events)
        cum_ej = sum(sum(1 for e in ev if e < hi) for ev in eng.in_events)
        out.append(_window_traceset(eng, lo, hi, cum_inj - cum_ej))
    return out


def starvation_increase(baseline: StarvationStats, loaded: StarvationStats) -> float:
    """Fractional growth of starved flits over the baseline run."""
    if baseline.starved_flits == 0:
        raise ScenarioError("baseline has zero starved flits; increase is undefined")
    return (loaded.starved_flits - baseline.starved_flits) / baseline.starved_flits


def flit_conservation_report(trace: TraceSet) -> dict:
    total_inj = int(trace.per_node_injected.sum())
    total_ej = int(trace.per_node_ejected.sum())
    return {
        "injected": total_inj,
        "ejected": total_ej,
        "in_flight_end": trace.in_flight_end,
        "balanced": total_inj == total_ej + trace.in_flight_end,
        "per_node": [
            {"node": j, "injected": int(trace.per_node_injected[j]),
             "ejected": int(trace.per_node_ejected[j])}
            for j in range(trace.num_nodes)
        ],
    }


# -- NGTR trace file format ----------------------------------------------

_NGTR_MAGIC = b"NGTR"
_NGTR_VERSION = 1


def save_trace(trace: TraceSet, path):
    atk = trace.attack
    mips = list(atk.mips) if atk else []
    vips = list(atk.vips) if atk else []
    parts = [
        _NGTR_MAGIC,
        struct.pack("<H", _NGTR_VERSION),
        trace.topo_digest,
        struct.pack("<IQ", trace.num_nodes, trace.duration),
        struct.pack("<BH", 1 if atk else 0, len(mips)),
        struct.pack(f"<{len(mips)}I", *mips),
        struct.pack("<H", len(vips)),
        struct.pack(f"<{len(vips)}I", *vips),
        struct.pack("<dQ", atk.pir if atk else 0.0, atk.start_cycle if atk else 0),
        struct.pack("<QQQq", trace.stats.starved_flits, trace.stats.injected_flits,
                    trace.stats.ejected_flits, trace.in_flight_end),
    ]
    for j in range(trace.num_nodes):
        parts.append(struct.pack("<II", int(trace.per_node_injected[j]),
                                 int(trace.per_node_ejected[j])))
        parts.append(struct.pack("<I", len(trace.iifd[j])))
        parts.append(trace.iifd[j].tobytes())
        parts.append(struct.pack("<I", len(trace.oifd[j])))
        parts.append(trace.oifd[j].tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_trace(path) -> TraceSet:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != _NGTR_MAGIC:
        raise IOFormatError(f"{path}: not an NGTR trace file")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != _NGTR_VERSION:
        raise IOFormatError(f"{path}: unsupported NGTR version {version}")
    off = 6
    digest = buf[off:off + 8]; off += 8
    n, duration = struct.unpack_from("<IQ", buf, off); off += 12
    is_atk, n_mips = struct.unpack_from("<BH", buf, off); off += 3
    mips = struct.unpack_from(f"<{n_mips}I", buf, off); off += 4 * n_mips
    (n_vips,) = struct.unpack_from("<H", buf, off); off += 2
    vips = struct.unpack_from(f"<{n_vips}I", buf, off); off += 4 * n_vips
    pir, start = struct.unpack_from("<dQ", buf, off); off += 16
    starved, inj, ej, in_flight = struct.unpack_from("<QQQq", buf, off); off += 32
    per_inj = np.zeros(n, dtype=np.int64)
    per_ej = np.zeros(n, dtype=np.int64)
    iifd, oifd = [], []
    try:
        for j in range(n):
            per_inj[j], per_ej[j] = struct.unpack_from("<II", buf, off); off += 8
            (li,) = struct.unpack_from("<I", buf, off); off += 4
            iifd.append(np.frombuffer(buf, dtype=np.uint8, count=li, offset=off).copy())
            off += li
            (lo,) = struct.unpack_from("<I", buf, off); off += 4
            oifd.append(np.frombuffer(buf, dtype=np.uint8, count=lo, offset=off).copy())
            off += lo
    except (struct.error, ValueError) as exc:
        raise IOFormatError(f"{path}: truncated NGTR file") from exc
    attack = AttackConfig(tuple(mips), tuple(vips), pir, start) if is_atk else None
    stats = StarvationStats(starved, inj, ej)
    return TraceSet(n, duration, iifd, oifd, stats, per_inj, per_ej,
                    in_flight, digest, attack)
