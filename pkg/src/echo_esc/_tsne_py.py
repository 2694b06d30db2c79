"""Pure numpy t-SNE kernels; same contract as the compiled ``_tsne_core``."""
import numpy as np

LN2 = np.log(2.0)


def conditional_p(sqdist, perplexity, tol=1e-5, max_iter=200):
    """Row-conditional affinities with per-row entropy (bits) matched to log2(perplexity).

    Returns ``(P, beta, entropy_bits, converged)``; P has a zero diagonal and
    unit row sums.
    """
    D = np.ascontiguousarray(sqdist, dtype=np.float64)
    m = D.shape[0]
    target = np.log2(perplexity)
    off = ~np.eye(m, dtype=bool)
    d = D[off].reshape(m, m - 1)
    d = d - d.min(axis=1, keepdims=True)

    beta = np.ones(m)
    lo = np.zeros(m)
    hi = np.full(m, np.inf)
    active = np.ones(m, dtype=bool)
    converged = np.zeros(m, dtype=bool)
    entropy = np.zeros(m)
    rows = np.zeros_like(d)
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        b = beta[idx, None]
        p = np.exp(-d[idx] * b)
        s = p.sum(axis=1)
        h = (np.log(s) + beta[idx] * (d[idx] * p).sum(axis=1) / s) / LN2
        rows[idx] = p / s[:, None]
        entropy[idx] = h
        diff = h - target
        done = np.abs(diff) < tol
        converged[idx[done]] = True
        active[idx[done]] = False
        up = idx[~done & (diff > 0)]
        down = idx[~done & (diff <= 0)]
        lo[up] = beta[up]
        beta[up] = np.where(np.isinf(hi[up]), beta[up] * 2.0, (beta[up] + hi[up]) / 2.0)
        hi[down] = beta[down]
        beta[down] = (beta[down] + lo[down]) / 2.0
    P = np.zeros((m, m))
    P[off] = rows.ravel()
    return P, beta, entropy, converged


def kl_gradient(P, Y, exaggeration=1.0):
    """Gradient of KL(P || Q) w.r.t. ``Y`` (with P scaled by ``exaggeration``) and KL(P || Q)."""
    P = np.asarray(P, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    sq = (Y * Y).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (Y @ Y.T), 0.0)
    num = 1.0 / (1.0 + d2)
    np.fill_diagonal(num, 0.0)
    Z = num.sum()
    Q = num / Z
    W = (exaggeration * P - Q) * num
    grad = 4.0 * (W.sum(axis=1)[:, None] * Y - W @ Y)
    mask = P > 0
    kl = float((P[mask] * np.log(P[mask] / Q[mask])).sum())
    return grad, kl
