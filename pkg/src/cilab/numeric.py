"""Dense linear-algebra helpers and seeded random streams.

Matrices are plain 2-D ``float64`` numpy arrays (C order). Every other
module builds on the handful of functions here.
"""

from __future__ import annotations

import zlib
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionError

__all__ = ["as_matrix", "gram", "double_center", "matmul", "RngStream"]


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    a = np.ascontiguousarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {a.shape}")
    if a.size == 0:
        raise DimensionError(f"{name} is empty (shape {a.shape})")
    return a


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "A")
    b = as_matrix(b, "B")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def gram(x) -> np.ndarray:
    """Linear-kernel Gram matrix ``X @ X.T``, exactly symmetrised."""
    x = as_matrix(x, "X")
    k = x @ x.T
    # BLAS may round the two triangles differently; mirror the upper one.
    upper = np.triu(k)
    return upper + np.triu(k, 1).T


def double_center(k) -> np.ndarray:
    """Return ``H K H`` with ``H = I - 11^T / b``.

    Implemented as row/column mean removal, which is algebraically the
    same product without forming ``H``.
    """
    k = as_matrix(k, "K")
    if k.shape[0] != k.shape[1]:
        raise DimensionError(f"centering needs a square matrix, got {k.shape}")
    row_mean = k.mean(axis=1, keepdims=True)
    col_mean = k.mean(axis=0, keepdims=True)
    return k - row_mean - col_mean + k.mean()


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError("stream keys must be non-negative")
        return int(key)
    return zlib.crc32(str(key).encode("utf-8"))


class RngStream:
    """Seeded PCG64 stream with deterministic named sub-streams.

    ``derive("stage", 3)`` always yields the same child for the same
    parent seed and key path, independent of how many draws the parent
    has already made. A stream must not be shared between threads.
    """

    def __init__(self, seed: int, path: Sequence[int] = ()):
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def derive(self, *keys) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(_key_to_int(k) for k in keys))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, path={self.path})"

    @property
    def lineage(self) -> dict:
        return {"seed": self.seed, "path": list(self.path)}

    # thin wrappers; enough for every caller in the package
    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def choice(self, a, size=None, replace=True):
        return self.generator.choice(a, size=size, replace=replace)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def random(self, size=None):
        return self.generator.random(size)


def fixed_order_sum(values: Iterable[float]) -> float:
    """Left-to-right float sum (no pairwise or compensated tricks)."""
    total = 0.0
    for v in values:
        total += float(v)
    return total
