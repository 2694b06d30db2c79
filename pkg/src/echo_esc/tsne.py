"""Exact t-SNE for embedding visualisation (O(M^2); at most 5000 points).

Optimizer: gradient descent with momentum 0.5 -> 0.8 and per-coordinate
adaptive gains, early exaggeration x12 for the first 250 iterations,
learning rate M / 12.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import DataError, NonFiniteGradient, PerplexityInfeasible

MAX_POINTS = 5000
ENTROPY_TOL = 1e-5


@dataclass
class TsneResult:
    coords: np.ndarray  # [M, 2]
    kl: np.ndarray  # KL(P || Q) before each update
    P: np.ndarray  # symmetric joint affinities
    entropy_bits: np.ndarray  # achieved per-point conditional entropy
    exaggeration_iters: int

    @property
    def kl_at_exaggeration_end(self) -> float:
        return float(self.kl[self.exaggeration_iters])


def squared_distances(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    sq = (X * X).sum(axis=1)
    D = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (X @ X.T), 0.0)
    np.fill_diagonal(D, 0.0)
    return D


def joint_probabilities(X, perplexity: float, tol: float = ENTROPY_TOL, backend=None):
    """Symmetric P (sums to 1, zero diagonal) and the per-point entropies in bits."""
    k = backend or _kernels
    X = np.asarray(X, dtype=np.float64)
    m = X.shape[0]
    if m < 3 * perplexity:
        raise PerplexityInfeasible(f"{m} points cannot support perplexity {perplexity} (need >= {3 * perplexity})")
    Pc, _, ent, ok = k.conditional_p(squared_distances(X), float(perplexity), tol, 200)
    if not np.all(ok):
        bad = np.flatnonzero(~ok)
        raise PerplexityInfeasible(f"entropy search did not converge for points {bad[:10].tolist()}")
    P = (Pc + Pc.T) / (2.0 * m)
    return P, ent


def kl_divergence(P, Y) -> float:
    return _kernels.kl_gradient(P, Y, 1.0)[1]


def tsne(X, perplexity: float = 30.0, iterations: int = 1000, seed: int = 0, *,
         exaggeration: float = 12.0, exaggeration_iters: int = 250, learning_rate: float | None = None,
         backend=None) -> TsneResult:
    k = backend or _kernels
    X = np.asarray(getattr(X, "vectors", X), dtype=np.float64)
    m = X.shape[0]
    if m > MAX_POINTS:
        raise DataError(f"exact t-SNE is capped at {MAX_POINTS} points, got {m}; subsample first")
    if not np.all(np.isfinite(X)):
        raise DataError("t-SNE input contains non-finite values")
    P, ent = joint_probabilities(X, perplexity, backend=backend)
    lr = m / 12.0 if learning_rate is None else learning_rate

    rng = np.random.default_rng(seed)
    Y = rng.normal(0.0, 1e-4, size=(m, 2))
    update = np.zeros_like(Y)
    gains = np.ones_like(Y)
    kl = np.empty(iterations)
    for it in range(iterations):
        ex = exaggeration if it < exaggeration_iters else 1.0
        momentum = 0.5 if it < exaggeration_iters else 0.8
        grad, kl[it] = k.kl_gradient(P, Y, ex)
        if not np.all(np.isfinite(grad)):
            raise NonFiniteGradient(f"non-finite t-SNE gradient at iteration {it}")
        same_sign = np.sign(grad) == np.sign(update)
        gains = np.where(same_sign, gains * 0.8, gains + 0.2)
        np.maximum(gains, 0.01, out=gains)
        update = momentum * update - lr * gains * grad
        Y = Y + update
    return TsneResult(Y, kl, P, ent, min(exaggeration_iters, iterations - 1))
