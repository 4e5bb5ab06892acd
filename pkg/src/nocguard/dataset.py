"""Scenario generation, trace windowing, and dataset assembly.

The generation protocol per (profile, mapping) pair: one long clean run
split into two length-l windows (two normal graphs), then four attack runs
that reuse the same benign workload seed -- three with randomly placed MIPs
flooding one random victim memory controller, one with MIPs split across
two victims.
"""

from __future__ import annotations

import hashlib
import json
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import rng
from .errors import DatasetError, IOFormatError, ShapeError
from .simulator import (AttackConfig, SimConfig, TraceSet, benign_profile,
                        run_scenario, run_scenario_windows)
from .topology import Topology, adjacency_matrix

PAD_DELAY = 255        # saturation value doubles as the idle padding token
NORM = 255.0
DEFAULT_SERIES_LEN = 400


@dataclass(frozen=True)
class Scenario:
    profile: str
    mapping_seed: int
    kind: str                      # "normal" or "attack"
    attack: Optional[AttackConfig]
    node_labels: np.ndarray        # uint8, 1 = malicious


@dataclass
class SpatioTemporalGraph:
    a: np.ndarray                  # [N, N] binary adjacency
    x: np.ndarray                  # [N, 2, l] normalized delay windows
    node_labels: np.ndarray        # [N] uint8
    graph_label: int               # 1 iff any node is malicious

    @property
    def num_nodes(self):
        return self.x.shape[0]

    @property
    def series_len(self):
        return self.x.shape[2]


@dataclass
class Dataset:
    graphs: list
    train_idx: np.ndarray
    test_idx: np.ndarray
    class_weights: tuple           # (w_benign, w_malicious)
    topology: Topology
    series_len: int
    split_seed: int
    scenarios: list = field(default_factory=list)

    def digest(self) -> bytes:
        h = hashlib.sha256()
        for g in self.graphs:
            h.update(g.x.tobytes())
            h.update(g.node_labels.tobytes())
        h.update(self.train_idx.tobytes())
        return h.digest()[:8]


def window_trace(trace: TraceSet, l: int) -> np.ndarray:
    """First-l delay windows per node, padded with 255 and scaled into [0,1]."""
    if l < 1:
        raise DatasetError(f"window length must be >= 1, got {l}")
    n = trace.num_nodes
    out = np.full((n, 2, l), PAD_DELAY, dtype=np.float32)
    for j in range(n):
        ii = trace.iifd[j][:l]
        oo = trace.oifd[j][:l]
        out[j, 0, :len(ii)] = ii
        out[j, 1, :len(oo)] = oo
    out /= NORM
    return out


def build_graph(windows: np.ndarray, topology: Topology,
                node_labels: np.ndarray) -> SpatioTemporalGraph:
    if windows.shape[0] != topology.num_nodes:
        raise ShapeError(
            f"window count {windows.shape[0]} != node count {topology.num_nodes}")
    if node_labels.shape != (topology.num_nodes,):
        raise ShapeError(f"bad label shape {node_labels.shape}")
    a = adjacency_matrix(topology).astype(np.float32)
    labels = node_labels.astype(np.uint8)
    return SpatioTemporalGraph(a, windows.astype(np.float32), labels,
                               int(labels.any()))


def _draw_attack(topo: Topology, mseed: int, scenario_idx: int,
                 n_mips: int, pir: float) -> AttackConfig:
    non_mc = [i for i in range(topo.num_nodes) if i not in topo.mc_nodes]
    if n_mips > len(non_mc):
        raise DatasetError(f"cannot place {n_mips} MIPs on {len(non_mc)} non-MC nodes")
    g = np.random.default_rng(rng.hash64(mseed, scenario_idx, 21))
    sel = g.choice(len(non_mc), size=n_mips, replace=False)
    mips = tuple(non_mc[int(i)] for i in sel)
    n_vips = 2 if scenario_idx == 3 else 1
    vips = tuple(int(v) for v in g.choice(topo.mc_nodes, size=n_vips, replace=False))
    return AttackConfig(mips, vips, pir)


def _mapping_graphs(topo, prof, duration, buffer_depth, l, mseed, n_mips, pir):
    """All six graphs for one (profile, mapping) pair."""
    graphs, scenarios = [], []
    clean = SimConfig(topo, duration, prof, None, buffer_depth, mseed)
    zeros = np.zeros(topo.num_nodes, dtype=np.uint8)
    for tr in run_scenario_windows(clean, 2):
        graphs.append(build_graph(window_trace(tr, l), topo, zeros))
        scenarios.append(Scenario(prof.name, mseed, "normal", None, zeros))
    for s in range(4):
        atk = _draw_attack(topo, mseed, s, n_mips, pir)
        cfg = SimConfig(topo, duration, prof, atk, buffer_depth, mseed)
        labels = zeros.copy()
        labels[list(atk.mips)] = 1
        graphs.append(build_graph(window_trace(run_scenario(cfg), l), topo, labels))
        scenarios.append(Scenario(prof.name, mseed, "attack", atk, labels))
    return graphs, scenarios


def generate_dataset(profiles, mappings_per_profile: int, base_config: SimConfig,
                     l: int = DEFAULT_SERIES_LEN, seed: int = 0,
                     n_mips: int = 3, pir: float = 0.05,
                     train_fraction: float = 0.9, workers: int = 1) -> Dataset:
    """Run the full scenario grid and assemble a split dataset."""
    if mappings_per_profile < 1:
        raise DatasetError("mappings_per_profile must be >= 1")
    topo = base_config.topology
    jobs = []
    for pi, pname in enumerate(profiles):
        prof = benign_profile(pname, topo) if isinstance(pname, str) else pname
        for m in range(mappings_per_profile):
            mseed = rng.hash64(seed, pi, m)
            jobs.append((topo, prof, base_config.duration, base_config.buffer_depth,
                         l, mseed, n_mips, pir))
    graphs, scenarios = [], []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_mapping_job, jobs, chunksize=1))
    else:
        results = [_mapping_job(j) for j in jobs]
    for gs, sc in results:
        graphs.extend(gs)
        scenarios.extend(sc)
    labels = np.array([g.graph_label for g in graphs])
    train_idx, test_idx = split_dataset(labels, train_fraction, seed)
    weights = class_weights(graphs, train_idx)
    return Dataset(graphs, train_idx, test_idx, weights, topo, l, seed, scenarios)


def _mapping_job(args):
    return _mapping_graphs(*args)


def class_weights(graphs, train_idx) -> tuple:
    """Inverse-frequency node-class weights: w_c = total / (2 * count_c)."""
    n_mal = sum(int(graphs[i].node_labels.sum()) for i in train_idx)
    n_tot = sum(graphs[i].node_labels.size for i in train_idx)
    n_ben = n_tot - n_mal
    if n_mal == 0 or n_ben == 0:
        raise DatasetError("training split must contain both node classes")
    return (n_tot / (2.0 * n_ben), n_tot / (2.0 * n_mal))


def split_dataset(graph_labels: np.ndarray, train_fraction: float, seed: int):
    """Stratified train/test split; train size = floor(fraction * total)."""
    if not 0.0 < train_fraction < 1.0:
        raise DatasetError(f"train fraction must be in (0,1), got {train_fraction}")
    labels = np.asarray(graph_labels)
    total = len(labels)
    classes = sorted(set(labels.tolist()))
    if total < 2 or len(classes) < 2:
        raise DatasetError("need at least one graph of each class to stratify")
    target = int(np.floor(train_fraction * total))
    per_class = {}
    remainders = []
    for c in classes:
        idx = np.nonzero(labels == c)[0]
        g = np.random.default_rng(rng.hash64(seed, 31, int(c)))
        idx = idx[g.permutation(len(idx))]
        exact = train_fraction * len(idx)
        take = int(np.floor(exact))
        per_class[c] = (idx, take)
        remainders.append((exact - take, -int(c)))
    short = target - sum(t for _, t in per_class.values())
    for _, negc in sorted(remainders, reverse=True)[:short]:
        idx, take = per_class[-negc]
        per_class[-negc] = (idx, take + 1)
    train, test = [], []
    for c in classes:
        idx, take = per_class[c]
        train.extend(idx[:take].tolist())
        test.extend(idx[take:].tolist())
    return np.array(sorted(train)), np.array(sorted(test))


# -- NGDS dataset file format ----------------------------------------------

_NGDS_MAGIC = b"NGDS"
_NGDS_VERSION = 1


def save_dataset(ds: Dataset, path):
    topo_json = ds.topology.to_json().encode()
    parts = [
        _NGDS_MAGIC,
        struct.pack("<H", _NGDS_VERSION),
        ds.topology.digest(),
        struct.pack("<I", len(topo_json)), topo_json,
        struct.pack("<IdddQ", ds.series_len, NORM,
                    ds.class_weights[0], ds.class_weights[1], ds.split_seed),
        struct.pack("<III", len(ds.graphs), len(ds.train_idx), len(ds.test_idx)),
        ds.train_idx.astype("<u4").tobytes(),
        ds.test_idx.astype("<u4").tobytes(),
    ]
    for g in ds.graphs:
        parts.append(struct.pack("<B", g.graph_label))
        parts.append(g.node_labels.astype(np.uint8).tobytes())
        parts.append(g.x.astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != _NGDS_MAGIC:
        raise IOFormatError(f"{path}: not an NGDS dataset file")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != _NGDS_VERSION:
        raise IOFormatError(f"{path}: unsupported NGDS version {version}")
    off = 6 + 8
    (tlen,) = struct.unpack_from("<I", buf, off); off += 4
    topo = Topology.from_json(buf[off:off + tlen].decode()); off += tlen
    l, norm, w_ben, w_mal, split_seed = struct.unpack_from("<IdddQ", buf, off)
    off += struct.calcsize("<IdddQ")
    n_graphs, n_train, n_test = struct.unpack_from("<III", buf, off); off += 12
    train_idx = np.frombuffer(buf, "<u4", n_train, off).astype(np.int64)
    off += 4 * n_train
    test_idx = np.frombuffer(buf, "<u4", n_test, off).astype(np.int64)
    off += 4 * n_test
    n = topo.num_nodes
    a = adjacency_matrix(topo).astype(np.float32)
    graphs = []
    try:
        for _ in range(n_graphs):
            (glabel,) = struct.unpack_from("<B", buf, off); off += 1
            labels = np.frombuffer(buf, np.uint8, n, off).copy(); off += n
            x = np.frombuffer(buf, "<f4", n * 2 * l, off).reshape(n, 2, l).copy()
            off += 4 * n * 2 * l
            graphs.append(SpatioTemporalGraph(a, x, labels, int(glabel)))
    except (struct.error, ValueError) as exc:
        raise IOFormatError(f"{path}: truncated NGDS file") from exc
    return Dataset(graphs, train_idx, test_idx, (w_ben, w_mal), topo, l, split_seed)
