"""Exact t-SNE (O(n^2) affinities, no Barnes-Hut) for a few hundred points."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ParameterError
from ..numeric import RngStream, as_matrix

__all__ = ["TsneResult", "tsne_run", "tsne_embed", "conditional_affinities", "kl_divergence"]

EXAGGERATION = 12.0
LEARNING_RATE = 200.0
MOMENTUM_EARLY = 0.5
MOMENTUM_LATE = 0.8
MIN_GAIN = 0.01
PERPLEXITY_TOL = 1e-4


@dataclass
class TsneResult:
    embedding: np.ndarray
    kl_initial: float
    kl_final: float
    perplexities: np.ndarray


def _sq_distances(x: np.ndarray) -> np.ndarray:
    sq = np.sum(x * x, axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def _row_entropy(dist_row: np.ndarray, beta: float):
    # shift by the minimum so exp() never underflows to an all-zero row
    shifted = dist_row - dist_row.min()
    w = np.exp(-beta * shifted)
    total = w.sum()
    p = w / total
    h = np.log(total) + beta * float(np.sum(shifted * p))
    return h, p


def conditional_affinities(sq_dist: np.ndarray, perplexity: float, max_iter: int = 200):
    """Per-row Gaussian conditionals p(j|i) with bandwidths found by bisection.

    Returns ``(P_cond, achieved_perplexities)``. Raises ``ParameterError``
    when a row cannot reach the target perplexity (e.g. duplicate points).
    """
    n = sq_dist.shape[0]
    target = np.log(perplexity)
    p_cond = np.zeros((n, n))
    achieved = np.zeros(n)
    for i in range(n):
        row = np.delete(sq_dist[i], i)
        if row.max() <= 0.0:
            raise ParameterError(f"point {i} coincides with every other point")
        lo, hi = 0.0, np.inf
        beta = 1.0 / max(np.median(row[row > 0]) if np.any(row > 0) else 1.0, 1e-300)
        for _ in range(max_iter):
            h, p = _row_entropy(row, beta)
            if abs(np.exp(h) - perplexity) < PERPLEXITY_TOL:
                break
            if h > target:
                lo = beta
                beta = beta * 2.0 if hi == np.inf else 0.5 * (beta + hi)
            else:
                hi = beta
                beta = 0.5 * (beta + lo)
        else:
            raise ParameterError(
                f"perplexity {perplexity} not reachable for point {i} "
                f"(got {np.exp(h):.6g})"
            )
        achieved[i] = np.exp(h)
        p_cond[i, np.arange(n) != i] = p
    return p_cond, achieved


def _student_q(y: np.ndarray):
    num = 1.0 / (1.0 + _sq_distances(y))
    np.fill_diagonal(num, 0.0)
    return num / num.sum(), num


def kl_divergence(p: np.ndarray, y: np.ndarray) -> float:
    q, _ = _student_q(y)
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / np.maximum(q[mask], 1e-300))))


def tsne_run(
    features,
    perplexity: float = 30.0,
    iterations: int = 1000,
    rng: RngStream | None = None,
) -> TsneResult:
    """Embed ``features`` in 2-D and report KL(P||Q) before and after."""
    x = as_matrix(features, "features")
    n = x.shape[0]
    if not perplexity > 1:
        raise ParameterError("perplexity must exceed 1")
    if n < 3 * perplexity:
        raise ParameterError(
            f"{n} rows is too few for perplexity {perplexity} (need >= {3 * perplexity:g})"
        )
    if iterations < 1:
        raise ParameterError("iterations must be >= 1")
    rng = rng if rng is not None else RngStream(0)

    p_cond, achieved = conditional_affinities(_sq_distances(x), perplexity)
    p = (p_cond + p_cond.T) / (2.0 * n)
    np.maximum(p, 1e-12, out=p)
    np.fill_diagonal(p, 0.0)
    p /= p.sum()

    y = rng.normal(0.0, 1e-4, size=(n, 2))
    kl_initial = kl_divergence(p, y)
    velocity = np.zeros_like(y)
    gains = np.ones_like(y)
    early = max(1, iterations // 4)
    for it in range(iterations):
        exaggerate = it < early
        p_eff = p * EXAGGERATION if exaggerate else p
        momentum = MOMENTUM_EARLY if exaggerate else MOMENTUM_LATE
        q, num = _student_q(y)
        w = (p_eff - q) * num
        grad = 4.0 * (np.diag(w.sum(axis=1)) - w) @ y
        same_sign = (grad > 0) == (velocity > 0)
        gains = np.where(same_sign, gains * 0.8, gains + 0.2)
        np.maximum(gains, MIN_GAIN, out=gains)
        velocity = momentum * velocity - LEARNING_RATE * gains * grad
        y = y + velocity
        y = y - y.mean(axis=0)
    return TsneResult(y, kl_initial, kl_divergence(p, y), achieved)


def tsne_embed(features, perplexity: float = 30.0, iterations: int = 1000, rng: RngStream | None = None) -> np.ndarray:
    return tsne_run(features, perplexity, iterations, rng).embedding
