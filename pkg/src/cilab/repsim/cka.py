"""Linear-kernel HSIC and CKA estimators.

Two HSIC estimators are provided: the biased one over double-centred
Gram matrices and the unbiased HSIC_1 over diagonal-free Grams. CKA comes
in a full-batch form and a streaming mini-batch form that sums HSIC_1
over batches before normalising.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from ..errors import (
    DegenerateSizeError,
    DimensionError,
    ParameterError,
    ProtocolError,
    UndefinedSimilarityError,
)
from ..numeric import RngStream, as_matrix, double_center, gram

__all__ = [
    "hsic_biased",
    "hsic_unbiased",
    "cka_full",
    "cka_unbiased",
    "CkaAccumulator",
    "cka_minibatch_update",
    "cka_minibatch_finalize",
    "LayerTapSet",
    "layerwise_cka",
    "DEFAULT_CKA_BATCH",
    "DEFAULT_CKA_PASSES",
]

DEFAULT_CKA_BATCH = 256
DEFAULT_CKA_PASSES = 10

# relative Frobenius size under which a centred Gram counts as zero
_ZERO_GRAM_RTOL = 1e-10


def _check_pair(k, l, min_size: int):
    k = as_matrix(k, "K")
    l = as_matrix(l, "L")
    for name, m in (("K", k), ("L", l)):
        if m.shape[0] != m.shape[1]:
            raise DimensionError(f"{name} must be square, got {m.shape}")
    if k.shape != l.shape:
        raise DimensionError(f"Gram size mismatch: {k.shape} vs {l.shape}")
    if k.shape[0] < min_size:
        raise DegenerateSizeError(
            f"need at least {min_size} samples, got {k.shape[0]}"
        )
    return k, l


def hsic_biased(k, l) -> float:
    """Biased HSIC: <vec(HKH), vec(HLH)> / (b - 1)^2."""
    k, l = _check_pair(k, l, 2)
    b = k.shape[0]
    kc = double_center(k)
    lc = kc if l is k else double_center(l)
    return float(np.sum(kc * lc)) / (b - 1) ** 2


def hsic_unbiased(k, l) -> float:
    """Unbiased HSIC_1 estimator over Gram matrices with zeroed diagonals.

    Can be negative. Needs ``n >= 4``.
    """
    k, l = _check_pair(k, l, 4)
    n = k.shape[0]
    kt = k.copy()
    lt = l.copy()
    np.fill_diagonal(kt, 0.0)
    np.fill_diagonal(lt, 0.0)
    trace_kl = float(np.sum(kt * lt.T))
    sum_k = float(kt.sum())
    sum_l = float(lt.sum())
    # 1^T K L 1 = (K^T 1) . (L 1)
    ones_kl_ones = float(kt.sum(axis=0) @ lt.sum(axis=1))
    total = (
        trace_kl
        + sum_k * sum_l / ((n - 1) * (n - 2))
        - 2.0 / (n - 2) * ones_kl_ones
    )
    return total / (n * (n - 3))


def _check_rows(x, y):
    x = as_matrix(x, "X")
    y = as_matrix(y, "Y")
    if x.shape[0] != y.shape[0]:
        raise DimensionError(
            f"activations need the same row count, got {x.shape[0]} and {y.shape[0]}"
        )
    return x, y


def cka_full(x, y) -> float:
    """Full-batch linear CKA between activation matrices ``X`` (b x z1) and ``Y`` (b x z2).

    Raises ``UndefinedSimilarityError`` when either centred Gram vanishes
    (constant features) instead of returning a silent 0.
    """
    x, y = _check_rows(x, y)
    if x.shape[0] < 2:
        raise DegenerateSizeError("CKA needs at least 2 samples")
    kc = double_center(gram(x))
    lc = double_center(gram(y))
    for name, c, raw in (("X", kc, x), ("Y", lc, y)):
        scale = float(np.sum(raw * raw))
        if np.sqrt(np.sum(c * c)) <= _ZERO_GRAM_RTOL * scale:
            raise UndefinedSimilarityError(f"{name} has constant features; CKA undefined")
    b = x.shape[0]
    d = (b - 1) ** 2
    hxy = float(np.sum(kc * lc)) / d
    hxx = float(np.sum(kc * kc)) / d
    hyy = float(np.sum(lc * lc)) / d
    return hxy / math.sqrt(hxx * hyy)


@dataclass
class CkaAccumulator:
    """Running HSIC_1 sums for streaming (mini-batch) CKA."""

    sum_xy: float = 0.0
    sum_xx: float = 0.0
    sum_yy: float = 0.0
    batches_seen: int = 0
    batch_size: int | None = None

    def update(self, xi, yi) -> "CkaAccumulator":
        xi, yi = _check_rows(xi, yi)
        n = xi.shape[0]
        if n < 4:
            raise DegenerateSizeError(f"mini-batch CKA needs n >= 4, got {n}")
        if self.batch_size is None:
            self.batch_size = n
        elif n != self.batch_size:
            raise ProtocolError(
                f"batch size changed mid-stream: {self.batch_size} -> {n}"
            )
        k = gram(xi)
        l = gram(yi)
        self.sum_xy += hsic_unbiased(k, l)
        self.sum_xx += hsic_unbiased(k, k)
        self.sum_yy += hsic_unbiased(l, l)
        self.batches_seen += 1
        return self

    def finalize(self) -> float:
        if self.batches_seen < 1:
            raise UndefinedSimilarityError("no batches accumulated")
        if not (self.sum_xx > 0 and self.sum_yy > 0):
            raise UndefinedSimilarityError(
                f"non-positive HSIC_1 self terms ({self.sum_xx}, {self.sum_yy})"
            )
        return self.sum_xy / math.sqrt(self.sum_xx * self.sum_yy)


def cka_minibatch_update(acc: CkaAccumulator, xi, yi) -> CkaAccumulator:
    return acc.update(xi, yi)


def cka_minibatch_finalize(acc: CkaAccumulator) -> float:
    return acc.finalize()


def cka_unbiased(x, y) -> float:
    """Full-batch CKA built from HSIC_1 terms (the k = 1 mini-batch value)."""
    x, y = _check_rows(x, y)
    k = gram(x)
    l = gram(y)
    hxy = hsic_unbiased(k, l)
    hxx = hsic_unbiased(k, k)
    hyy = hsic_unbiased(l, l)
    if not (hxx > 0 and hyy > 0):
        raise UndefinedSimilarityError(f"non-positive HSIC_1 self terms ({hxx}, {hyy})")
    return hxy / math.sqrt(hxx * hyy)


@dataclass
class LayerTapSet:
    """Activations captured at named points of a network, ordered by depth."""

    layer_ids: list[str]
    activations: list[np.ndarray] = field(repr=False)

    def __post_init__(self):
        if len(self.layer_ids) != len(self.activations):
            raise DimensionError("one activation matrix per layer id is required")
        if len(set(self.layer_ids)) != len(self.layer_ids):
            raise ProtocolError("duplicate layer ids in tap set")
        self.activations = [as_matrix(a, f"tap {i}") for i, a in zip(self.layer_ids, self.activations)]
        rows = {a.shape[0] for a in self.activations}
        if len(rows) > 1:
            raise DimensionError(f"taps disagree on row count: {sorted(rows)}")

    @property
    def rows(self) -> int:
        return self.activations[0].shape[0] if self.activations else 0

    def __len__(self):
        return len(self.layer_ids)

    def __getitem__(self, layer_id: str) -> np.ndarray:
        return self.activations[self.layer_ids.index(layer_id)]

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        return zip(self.layer_ids, self.activations)

    def select(self, ids: Sequence[str]) -> "LayerTapSet":
        return LayerTapSet(list(ids), [self[i] for i in ids])

    def renamed(self, ids: Sequence[str]) -> "LayerTapSet":
        return LayerTapSet(list(ids), list(self.activations))


def minibatch_orders(n_rows: int, batch_size: int, passes: int, rng: RngStream):
    """Yield index arrays: a fresh shuffle per pass, ragged tail dropped."""
    per_pass = n_rows // batch_size
    for _ in range(passes):
        perm = rng.permutation(n_rows)
        for j in range(per_pass):
            yield perm[j * batch_size:(j + 1) * batch_size]


def layerwise_cka(
    taps_a: LayerTapSet,
    taps_b: LayerTapSet,
    batch_size: int = DEFAULT_CKA_BATCH,
    passes: int = DEFAULT_CKA_PASSES,
    rng: RngStream | None = None,
) -> list[tuple[str, float]]:
    """Mini-batch CKA between same-id layers of two tap sets.

    Each layer draws its batch order from its own stream derived from
    ``rng`` and the layer id, so the result does not depend on the order
    in which layers are evaluated.
    """
    if list(taps_a.layer_ids) != list(taps_b.layer_ids):
        raise ProtocolError("tap sets have different layer ids")
    if taps_a.rows != taps_b.rows:
        raise ProtocolError(f"tap sets have different row counts ({taps_a.rows}, {taps_b.rows})")
    if batch_size < 4:
        raise ParameterError("batch_size must be >= 4")
    if passes < 1:
        raise ParameterError("passes must be >= 1")
    if taps_a.rows < batch_size:
        raise ParameterError(
            f"only {taps_a.rows} rows; cannot fill a batch of {batch_size}"
        )
    rng = rng if rng is not None else RngStream(0)
    out = []
    for layer_id, xa in taps_a.items():
        xb = taps_b[layer_id]
        acc = CkaAccumulator()
        for idx in minibatch_orders(taps_a.rows, batch_size, passes, rng.derive("layer", layer_id)):
            acc.update(xa[idx], xb[idx])
        out.append((layer_id, acc.finalize()))
    return out
