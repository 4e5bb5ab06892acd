"""The detector network: per-node temporal conv stack (weights shared across
nodes), two GraphConv layers over the NoC adjacency, a per-node FC head with
a sigmoid output, plus the training recipe and checkpoint round-trip.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nncore
from .dataset import Dataset, split_dataset
from .errors import ConfigError, InferenceError, IOFormatError, TrainingError
from .nncore import (Adam, AvgPool1d, Conv1d, Dropout, GraphConv, Linear,
                     PlateauController, ReLU, Sigmoid, out_len, weighted_bce)


@dataclass(frozen=True)
class ModelConfig:
    series_len: int = 400
    in_channels: int = 2
    conv_channels: tuple = (16, 16, 32, 32)
    conv_kernels: tuple = (5, 10, 10, 10)
    conv_strides: tuple = (1, 1, 1, 2)
    pool_kernels: tuple = (5, 5, 5, 5)
    pool_strides: tuple = (1, 2, 2, 2)
    conv_dropout: float = 0.30
    graph_widths: tuple = (256, 256)
    fc_widths: tuple = (400, 133, 44, 1)
    fc_dropout: float = 0.50          # applied after the second FC layer
    dtype: str = "f32"

    def temporal_trace(self):
        """Sequence lengths through the conv/pool pipeline, input first."""
        trace = [self.series_len]
        L = self.series_len
        for ck, cs, pk, ps in zip(self.conv_kernels, self.conv_strides,
                                  self.pool_kernels, self.pool_strides):
            L = out_len(L, ck, cs)
            trace.append(L)
            L = out_len(L, pk, ps)
            trace.append(L)
        return trace

    def flat_width(self):
        return self.temporal_trace()[-1] * self.conv_channels[-1]

    def np_dtype(self):
        return np.float64 if self.dtype == "f64" else np.float32

    def validate(self):
        npar = len(self.conv_channels)
        if not (len(self.conv_kernels) == len(self.conv_strides)
                == len(self.pool_kernels) == len(self.pool_strides) == npar):
            raise ConfigError("conv/pool hyperparameter lists must share a length")
        if self.temporal_trace()[-1] < 1:
            raise ConfigError("temporal pipeline collapses the series to zero length")
        if self.fc_widths[-1] != 1:
            raise ConfigError("final FC layer must have exactly 1 output")


class Model:
    """Assembled network with explicit forward/backward over all stages."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        self.meta = {"epochs_run": 0, "best_val_loss": None,
                     "seed": seed, "dataset_digest": ""}
        dt = cfg.np_dtype()
        gen = np.random.default_rng(seed)
        self.temporal = []
        c_prev = cfg.in_channels
        for c, ck, cs, pk, ps in zip(cfg.conv_channels, cfg.conv_kernels,
                                     cfg.conv_strides, cfg.pool_kernels,
                                     cfg.pool_strides):
            self.temporal += [Conv1d(c_prev, c, ck, cs, gen, dt), ReLU(),
                              Dropout(cfg.conv_dropout), AvgPool1d(pk, ps)]
            c_prev = c
        self.spatial = []
        f_prev = cfg.flat_width()
        for w in cfg.graph_widths:
            self.spatial += [GraphConv(f_prev, w, gen, dt), ReLU()]
            f_prev = w
        self.head = []
        for i, w in enumerate(cfg.fc_widths):
            self.head.append(Linear(f_prev, w, gen, dt))
            if i < len(cfg.fc_widths) - 1:
                self.head.append(ReLU())
            if i == 1:
                self.head.append(Dropout(cfg.fc_dropout))
            f_prev = w
        self.head.append(Sigmoid())

    # -- parameter plumbing ------------------------------------------------

    def _named_layers(self):
        for i, lay in enumerate(self.temporal):
            yield f"temporal.{i}", lay
        for i, lay in enumerate(self.spatial):
            yield f"spatial.{i}", lay
        for i, lay in enumerate(self.head):
            yield f"head.{i}", lay

    def parameters(self) -> dict:
        out = {}
        for name, lay in self._named_layers():
            for pname, arr in lay.params.items():
                out[f"{name}.{pname}"] = arr
        return out

    def gradients(self) -> dict:
        out = {}
        for name, lay in self._named_layers():
            for pname, arr in lay.grads.items():
                out[f"{name}.{pname}"] = arr
        return out

    def set_parameters(self, params: dict):
        own = self.parameters()
        if set(own) != set(params):
            raise ConfigError("parameter name mismatch while loading")
        for name, lay in self._named_layers():
            for pname in lay.params:
                src = params[f"{name}.{pname}"]
                if lay.params[pname].shape != src.shape:
                    raise ConfigError(f"shape mismatch for {name}.{pname}")
                lay.params[pname] = src.copy()

    # -- forward / backward --------------------------------------------------

    def forward(self, x: np.ndarray, a: np.ndarray, train=False, rng=None):
        """[G, N, 2, l] features + [N, N] adjacency -> [G, N] node scores."""
        cfg = self.cfg
        if x.ndim != 4 or x.shape[2] != cfg.in_channels or x.shape[3] != cfg.series_len:
            raise InferenceError(
                f"expected [G,N,{cfg.in_channels},{cfg.series_len}] input, got {x.shape}")
        if a.shape != (x.shape[1], x.shape[1]):
            raise InferenceError(f"adjacency {a.shape} does not match N={x.shape[1]}")
        g_count, n = x.shape[0], x.shape[1]
        h = x.reshape(g_count * n, cfg.in_channels, cfg.series_len)
        h = np.ascontiguousarray(h, dtype=cfg.np_dtype())
        for lay in self.temporal:
            h = lay.forward(h, train=train, rng=rng)
        h = h.reshape(g_count, n, -1)
        for lay in self.spatial:
            if isinstance(lay, GraphConv):
                h = lay.forward(h, a=a.astype(cfg.np_dtype()), train=train, rng=rng)
            else:
                h = lay.forward(h, train=train, rng=rng)
        h = h.reshape(g_count * n, -1)
        for lay in self.head:
            h = lay.forward(h, train=train, rng=rng)
        return h.reshape(g_count, n)

    def backward(self, dscores: np.ndarray):
        g_count, n = dscores.shape
        d = dscores.reshape(g_count * n, 1).astype(self.cfg.np_dtype())
        for lay in reversed(self.head):
            d = lay.backward(d)
        d = d.reshape(g_count, n, -1)
        for lay in reversed(self.spatial):
            d = lay.backward(d)
        d = d.reshape(g_count * n, -1)
        d = d.reshape(g_count * n, self.cfg.conv_channels[-1], -1)
        for lay in reversed(self.temporal):
            d = lay.backward(d)
        return d.reshape(g_count, n, self.cfg.in_channels, self.cfg.series_len)


def build_model(cfg: ModelConfig = None, seed: int = 0) -> Model:
    return Model(cfg or ModelConfig(), seed)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    lr: float = 0.0005
    plateau_patience: int = 15
    stop_patience: int = 60
    max_epochs: int = 100
    val_fraction: float = 0.1
    seed: int = 0

    def validate(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in (0,1)")


def _batch(graphs, idx):
    x = np.stack([graphs[i].x for i in idx])
    y = np.stack([graphs[i].node_labels for i in idx]).astype(np.float64)
    return x, y


def train(model: Model, ds: Dataset, tc: TrainConfig):
    """Minimize class-weighted node BCE; returns (model, history)."""
    tc.validate()
    weights = ds.class_weights
    a = ds.graphs[0].a
    inner_labels = np.array([ds.graphs[i].graph_label for i in ds.train_idx])
    fit_rel, val_rel = split_dataset(inner_labels, 1.0 - tc.val_fraction, tc.seed)
    fit_idx = ds.train_idx[fit_rel]
    val_idx = ds.train_idx[val_rel]
    if not any(ds.graphs[i].node_labels.any() for i in fit_idx):
        raise TrainingError("no malicious nodes in the training split")

    opt = Adam(lr=tc.lr)
    ctl = PlateauController(tc.lr, tc.plateau_patience, tc.stop_patience)
    gen = np.random.default_rng(tc.seed)
    drop_rng = np.random.default_rng(tc.seed + 0x9E3779B9)
    history = []
    best_params = {k: v.copy() for k, v in model.parameters().items()}
    best_val = np.inf

    for epoch in range(tc.max_epochs):
        order = gen.permutation(len(fit_idx))
        losses = []
        for start in range(0, len(order), tc.batch_size):
            bidx = fit_idx[order[start:start + tc.batch_size]]
            x, y = _batch(ds.graphs, bidx)
            scores = model.forward(x, a, train=True, rng=drop_rng)
            loss, dp = weighted_bce(scores.astype(np.float64), y, weights)
            if not np.isfinite(loss):
                raise TrainingError(f"loss diverged at epoch {epoch}")
            model.backward(dp)
            opt.step(model.parameters(), model.gradients())
            losses.append(loss)
        val_loss = evaluate_loss(model, ds, val_idx, weights)
        improved, reduced, stop = ctl.update(val_loss)
        if reduced:
            opt.lr = ctl.lr
        if improved or val_loss < best_val:
            best_val = val_loss
            best_params = {k: v.copy() for k, v in model.parameters().items()}
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)),
                        "val_loss": val_loss, "lr": ctl.lr})
        if stop:
            break

    model.set_parameters(best_params)
    model.meta["epochs_run"] = len(history)
    model.meta["best_val_loss"] = float(best_val)
    model.meta["dataset_digest"] = ds.digest().hex()
    return model, history


def evaluate_loss(model: Model, ds: Dataset, idx, weights, batch_size=64) -> float:
    a = ds.graphs[0].a
    total, count = 0.0, 0
    for start in range(0, len(idx), batch_size):
        bidx = idx[start:start + batch_size]
        x, y = _batch(ds.graphs, bidx)
        scores = model.forward(x, a, train=False)
        loss, _ = weighted_bce(scores.astype(np.float64), y, weights)
        total += loss * len(bidx)
        count += len(bidx)
    return total / max(count, 1)


# -- NGCK checkpoint format -------------------------------------------------

_NGCK_MAGIC = b"NGCK"
_NGCK_VERSION = 1
_DTYPE_CODES = {"<f4": 0, "<f8": 1}
_DTYPE_NAMES = {0: "<f4", 1: "<f8"}


def save_checkpoint(model: Model, path):
    doc = {"config": asdict(model.cfg), "meta": model.meta}
    blob = json.dumps(doc, sort_keys=True).encode()
    params = model.parameters()
    parts = [_NGCK_MAGIC, struct.pack("<H", _NGCK_VERSION),
             struct.pack("<I", len(blob)), blob,
             struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name])
        code = _DTYPE_CODES["<f8" if arr.dtype == np.float64 else "<f4"]
        nm = name.encode()
        parts.append(struct.pack("<H", len(nm)))
        parts.append(nm)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype(_DTYPE_NAMES[code]).tobytes())
    body = b"".join(parts)
    digest = hashlib.sha256(body).digest()[:8]
    with open(path, "wb") as fh:
        fh.write(body + digest)


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != _NGCK_MAGIC:
        raise IOFormatError(f"{path}: not an NGCK checkpoint")
    if len(buf) < 12:
        raise IOFormatError(f"{path}: truncated checkpoint")
    body, digest = buf[:-8], buf[-8:]
    if hashlib.sha256(body).digest()[:8] != digest:
        raise IOFormatError(f"{path}: checkpoint digest mismatch")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != _NGCK_VERSION:
        raise IOFormatError(f"{path}: unsupported checkpoint version {version}")
    (jlen,) = struct.unpack_from("<I", buf, 6)
    off = 10
    doc = json.loads(buf[off:off + jlen].decode())
    off += jlen
    cfg_doc = doc["config"]
    for key in ("conv_channels", "conv_kernels", "conv_strides",
                "pool_kernels", "pool_strides", "graph_widths", "fc_widths"):
        cfg_doc[key] = tuple(cfg_doc[key])
    cfg = ModelConfig(**cfg_doc)
    (n_params,) = struct.unpack_from("<I", buf, off)
    off += 4
    params = {}
    for _ in range(n_params):
        (nlen,) = struct.unpack_from("<H", buf, off); off += 2
        name = buf[off:off + nlen].decode(); off += nlen
        code, ndim = struct.unpack_from("<BB", buf, off); off += 2
        shape = struct.unpack_from(f"<{ndim}I", buf, off); off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(body, _DTYPE_NAMES[code], count, off).reshape(shape)
        off += arr.nbytes
        params[name] = arr.astype(cfg.np_dtype())
    model = Model(cfg, seed=doc["meta"].get("seed", 0))
    model.meta = doc["meta"]
    model.set_parameters(params)
    return model
