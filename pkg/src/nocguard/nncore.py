"""Dense-tensor neural building blocks with hand-written reverse-mode gradients.

Exactly the layer set the detector needs: valid 1D convolution, average
pooling, ReLU, inverted dropout, GraphConv message passing, fully connected,
sigmoid, class-weighted binary cross-entropy, Adam, and an LR-plateau /
early-stopping controller. Layers cache what their backward pass needs;
backward returns the gradient with respect to the layer input and fills
``grads`` for every parameter.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, NumericsError, ShapeError

STRICT_FINITE = True


def _check_finite(arr, where):
    if STRICT_FINITE and not np.isfinite(arr.sum()):
        raise NumericsError(f"non-finite values leaving {where}")


_CONV_BLOCK = 512


def out_len(length: int, k: int, stride: int) -> int:
    """Valid-window output length: floor((L - k) / stride) + 1."""
    return (length - k) // stride + 1


def init_uniform(shape, fan_in, gen, dtype):
    bound = np.sqrt(1.0 / fan_in)
    return gen.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    """Base class; layers without parameters leave these dicts empty."""

    def __init__(self):
        self.params = {}
        self.grads = {}

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError


class Conv1d(Layer):
    """Valid (no padding) cross-correlation over [B, C_in, L] inputs."""

    def __init__(self, c_in, c_out, k, stride=1, gen=None, dtype=np.float32):
        super().__init__()
        if stride < 1 or k < 1:
            raise ConfigError("kernel and stride must be >= 1")
        self.c_in, self.c_out, self.k, self.stride = c_in, c_out, k, stride
        gen = gen or np.random.default_rng(0)
        self.params["w"] = init_uniform((c_out, c_in, k), c_in * k, gen, dtype)
        self.params["b"] = np.zeros(c_out, dtype=dtype)
        self._x = None

    def forward(self, x, train=False, rng=None):
        if x.ndim != 3 or x.shape[1] != self.c_in:
            raise ShapeError(f"conv1d expected [B,{self.c_in},L], got {x.shape}")
        L = x.shape[2]
        if L < self.k:
            raise ShapeError(f"input length {L} shorter than kernel {self.k}")
        lo = out_len(L, self.k, self.stride)
        w, b = self.params["w"], self.params["b"]
        y = np.zeros((x.shape[0], self.c_out, lo), dtype=x.dtype)
        span = (lo - 1) * self.stride + 1
        # row blocks keep the per-offset slices cache-resident
        for s in range(0, x.shape[0], _CONV_BLOCK):
            xb, yb = x[s:s + _CONV_BLOCK], y[s:s + _CONV_BLOCK]
            for off in range(self.k):
                xs = xb[:, :, off:off + span:self.stride]
                yb += np.einsum("bil,oi->bol", xs, w[:, :, off], optimize=True)
        y += b[None, :, None]
        self._x = x
        _check_finite(y, "conv1d")
        return y

    def backward(self, dy):
        x = self._x
        w = self.params["w"]
        lo = dy.shape[2]
        span = (lo - 1) * self.stride + 1
        dw = np.zeros_like(w)
        dx = np.zeros_like(x)
        for s in range(0, x.shape[0], _CONV_BLOCK):
            xb, dyb = x[s:s + _CONV_BLOCK], dy[s:s + _CONV_BLOCK]
            dxb = dx[s:s + _CONV_BLOCK]
            for off in range(self.k):
                xs = xb[:, :, off:off + span:self.stride]
                dw[:, :, off] += np.tensordot(dyb, xs, axes=([0, 2], [0, 2]))
                dxb[:, :, off:off + span:self.stride] += np.einsum(
                    "bol,oi->bil", dyb, w[:, :, off], optimize=True)
        self.grads["w"] = dw
        self.grads["b"] = dy.sum(axis=(0, 2))
        return dx


class AvgPool1d(Layer):
    def __init__(self, k, stride):
        super().__init__()
        self.k, self.stride = k, stride

    def forward(self, x, train=False, rng=None):
        L = x.shape[2]
        if L < self.k:
            raise ShapeError(f"input length {L} shorter than pool window {self.k}")
        lo = out_len(L, self.k, self.stride)
        span = (lo - 1) * self.stride + 1
        y = np.zeros((x.shape[0], x.shape[1], lo), dtype=x.dtype)
        for off in range(self.k):
            y += x[:, :, off:off + span:self.stride]
        y /= self.k
        self._shape = x.shape
        return y

    def backward(self, dy):
        dx = np.zeros(self._shape, dtype=dy.dtype)
        lo = dy.shape[2]
        span = (lo - 1) * self.stride + 1
        g = dy / self.k
        for off in range(self.k):
            dx[:, :, off:off + span:self.stride] += g
        return dx


class ReLU(Layer):
    def forward(self, x, train=False, rng=None):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dy):
        return dy * self._mask


class Dropout(Layer):
    """Inverted dropout; identity in eval mode or at rate 0."""

    def __init__(self, rate):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"dropout rate must be in [0,1), got {rate}")
        self.rate = rate

    def forward(self, x, train=False, rng=None):
        if not train or self.rate == 0.0:
            self._mask = None
            return x
        keep = 1.0 - self.rate
        self._mask = (rng.random(x.shape) < keep).astype(x.dtype) / keep
        return x * self._mask

    def backward(self, dy):
        if self._mask is None:
            return dy
        return dy * self._mask


class GraphConv(Layer):
    """x_i' = W1^T x_i + W2^T sum_{j in N(i)} x_j + b over [G, N, F] batches."""

    def __init__(self, f_in, f_out, gen=None, dtype=np.float32):
        super().__init__()
        gen = gen or np.random.default_rng(0)
        self.params["w1"] = init_uniform((f_in, f_out), f_in, gen, dtype)
        self.params["w2"] = init_uniform((f_in, f_out), f_in, gen, dtype)
        self.params["b"] = np.zeros(f_out, dtype=dtype)

    def forward(self, x, a=None, train=False, rng=None):
        if a is None:
            raise ShapeError("graph_conv requires an adjacency matrix")
        if a.shape[0] != a.shape[1] or not np.array_equal(a, a.T):
            raise ShapeError("adjacency matrix must be square and symmetric")
        if x.ndim != 3 or x.shape[1] != a.shape[0]:
            raise ShapeError(f"expected [G,{a.shape[0]},F] features, got {x.shape}")
        ax = np.matmul(a, x)
        self._x, self._ax, self._a = x, ax, a
        y = (np.matmul(x, self.params["w1"]) + np.matmul(ax, self.params["w2"])
             + self.params["b"])
        _check_finite(y, "graph_conv")
        return y

    def backward(self, dy):
        w1, w2 = self.params["w1"], self.params["w2"]
        self.grads["w1"] = np.tensordot(self._x, dy, axes=([0, 1], [0, 1]))
        self.grads["w2"] = np.tensordot(self._ax, dy, axes=([0, 1], [0, 1]))
        self.grads["b"] = dy.sum(axis=(0, 1))
        dx = np.matmul(dy, w1.T) + np.matmul(self._a.T, np.matmul(dy, w2.T))
        return dx


def graph_conv(x, a, w1, w2, b):
    """Functional single-graph form used by oracle tests: [N,F_in] -> [N,F_out]."""
    layer = GraphConv(w1.shape[0], w1.shape[1])
    layer.params.update({"w1": w1, "w2": w2, "b": b})
    return layer.forward(x[None], a=a)[0]


class Linear(Layer):
    def __init__(self, f_in, f_out, gen=None, dtype=np.float32):
        super().__init__()
        gen = gen or np.random.default_rng(0)
        self.params["w"] = init_uniform((f_in, f_out), f_in, gen, dtype)
        self.params["b"] = np.zeros(f_out, dtype=dtype)

    def forward(self, x, train=False, rng=None):
        if x.shape[-1] != self.params["w"].shape[0]:
            raise ShapeError(
                f"linear expected last dim {self.params['w'].shape[0]}, got {x.shape}")
        self._x = x
        return x @ self.params["w"] + self.params["b"]

    def backward(self, dy):
        self.grads["w"] = self._x.reshape(-1, self._x.shape[-1]).T @ \
            dy.reshape(-1, dy.shape[-1])
        self.grads["b"] = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
        return dy @ self.params["w"].T


class Sigmoid(Layer):
    def forward(self, x, train=False, rng=None):
        # split by sign so exp never overflows
        e = np.exp(-np.abs(x))
        self._y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return self._y

    def backward(self, dy):
        return dy * self._y * (1.0 - self._y)


_EPS = 1e-7


def weighted_bce(p, y, weights=(1.0, 1.0)):
    """Mean class-weighted binary cross-entropy and its gradient wrt p."""
    if p.shape != y.shape:
        raise ShapeError(f"probability/label shape mismatch: {p.shape} vs {y.shape}")
    pc = np.clip(p, _EPS, 1.0 - _EPS)
    w = np.where(y > 0.5, weights[1], weights[0])
    per = -w * (y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    loss = float(per.mean())
    dp = w * (pc - y) / (pc * (1.0 - pc)) / p.size
    return loss, dp.astype(p.dtype)


class Adam:
    """Bias-corrected Adam over a dict of parameter arrays."""

    def __init__(self, lr=0.0005, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m, self.v = {}, {}
        self.t = 0

    def step(self, params: dict, grads: dict):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class PlateauController:
    """LR x0.1 after `plateau_patience` flat epochs; stop after `stop_patience`.

    An epoch improves when validation loss drops by more than `tol` below the
    best seen so far; both counters reset on improvement.
    """

    def __init__(self, lr, plateau_patience=15, stop_patience=60,
                 factor=0.1, tol=1e-6):
        self.lr = lr
        self.plateau_patience = plateau_patience
        self.stop_patience = stop_patience
        self.factor = factor
        self.tol = tol
        self.best = np.inf
        self.plateau_count = 0
        self.stop_count = 0

    def update(self, val_loss):
        """Returns (improved, lr_reduced, stop)."""
        if val_loss < self.best - self.tol:
            self.best = val_loss
            self.plateau_count = 0
            self.stop_count = 0
            return True, False, False
        self.plateau_count += 1
        self.stop_count += 1
        reduced = False
        if self.plateau_count >= self.plateau_patience:
            self.lr *= self.factor
            self.plateau_count = 0
            reduced = True
        return False, reduced, self.stop_count >= self.stop_patience


def numeric_gradient(f, arr, eps=1e-5):
    """Central finite differences of scalar f with respect to every entry."""
    g = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f()
        flat[i] = orig - eps
        lo = f()
        flat[i] = orig
        gf[i] = (hi - lo) / (2.0 * eps)
    return g


def max_relative_error(analytic, numeric, floor=1e-8):
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
