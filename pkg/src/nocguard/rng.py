"""Counter-based splittable randomness.

Every random decision in the workbench is a pure hash of (seed, counters),
so per-node streams are independent of each other and of evaluation order.
The mixer is the splitmix64 finalizer.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_C1 = 0xBF58476D1CE4E5B9
_C2 = 0x94D049BB133111EB
_K = (0x9E3779B97F4A7C15, 0xC2B2AE3D27D4EB4F, 0x165667B19E3779F9, 0xD6E8FEB86659FD93)


def mix64(z: int) -> int:
    z &= _MASK
    z = ((z ^ (z >> 30)) * _C1) & _MASK
    z = ((z ^ (z >> 27)) * _C2) & _MASK
    return z ^ (z >> 31)


def hash64(*fields: int) -> int:
    """Order-sensitive 64-bit hash of a tuple of integers."""
    h = 0x8CB92BA72F3D8DD7
    for i, f in enumerate(fields):
        h = mix64(h ^ ((f & _MASK) * _K[i % 4] & _MASK))
    return h


def uniform(*fields: int) -> float:
    """Deterministic uniform in [0, 1) keyed by the given integers."""
    return hash64(*fields) / 2.0 ** 64


def choice(seq, *fields: int):
    return seq[hash64(*fields) % len(seq)]


def _mix64_np(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_C1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_C2)
    return z ^ (z >> np.uint64(31))


def grid_hash(seed: int, n_rows: int, cols: np.ndarray, salt: int) -> np.ndarray:
    """uint64 hash grid of shape [n_rows, len(cols)], row = cycle, col = key."""
    rows = np.arange(n_rows, dtype=np.uint64) * np.uint64(_K[1])
    cols = cols.astype(np.uint64) * np.uint64(_K[2])
    base = np.uint64(mix64(seed) ^ (salt * _K[3] & _MASK))
    with np.errstate(over="ignore"):
        return _mix64_np(base ^ _mix64_np(rows[:, None] ^ cols[None, :]))


def grid_uniform(seed: int, n_rows: int, cols: np.ndarray, salt: int) -> np.ndarray:
    return grid_hash(seed, n_rows, cols, salt) / 2.0 ** 64
