"""Pure numpy fallback for the compiled kernels in ``_kernels.pyx``.

Same signatures and the same tie-breaking, so results agree exactly for the
index kernels and to roundoff for Sinkhorn.
"""

import numpy as np
from scipy.special import logsumexp


def knn_query(query, ref, k, exclude):
    query = np.asarray(query, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    d = ((query[:, None, :] - ref[None, :, :]) ** 2).sum(-1)
    rows = np.nonzero(exclude >= 0)[0]
    d[rows, exclude[rows]] = np.inf
    # stable sort keeps the lower index first on equal distances
    order = np.argsort(d, axis=1, kind="stable")
    return np.ascontiguousarray(order[:, :k]).astype(np.int64)


def farthest_point_order(pts, n, start):
    pts = np.asarray(pts, dtype=np.float64)
    mind = np.full(len(pts), np.inf)
    order = np.empty(n, dtype=np.int64)
    cur = int(start)
    for s in range(n):
        order[s] = cur
        d = ((pts - pts[cur]) ** 2).sum(1)
        np.minimum(mind, d, out=mind)
        cur = int(np.argmax(mind))  # first maximum, i.e. lowest index
    return order


def _log_rows(C, g, log_mu, eps):
    return eps * (log_mu - logsumexp((g[None, :] - C) / eps, axis=1))


def _log_cols(C, f, log_nu, eps):
    return eps * (log_nu - logsumexp((f[:, None] - C) / eps, axis=0))


def sinkhorn_log(C, log_mu, log_nu, eps, max_iters, tol, f0, g0, absorb=30.0):
    C = np.asarray(C, dtype=np.float64)
    mu, nu = np.exp(log_mu), np.exp(log_nu)
    f = _log_rows(C, np.array(g0, dtype=np.float64), log_mu, eps)
    g = _log_cols(C, f, log_nu, eps)
    it = 1
    K = np.exp((f[:, None] + g[None, :] - C) / eps)
    u, v = np.ones(len(f)), np.ones(len(g))
    while True:
        err = float(np.max(np.abs(u * (K @ v) - mu)))
        if err < tol or it >= max_iters:
            break
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            u = mu / (K @ v)
            v = nu / (K.T @ u)
            lu, lv = np.log(u), np.log(v)
        it += 1
        ok = np.all(np.isfinite(lu)) and np.all(np.isfinite(lv))
        if not ok:
            f = _log_rows(C, g, log_mu, eps)
            g = _log_cols(C, f, log_nu, eps)
            u, v = np.ones(len(f)), np.ones(len(g))
            K = np.exp((f[:, None] + g[None, :] - C) / eps)
        elif max(np.abs(lu).max(), np.abs(lv).max()) > absorb:
            f, g = f + eps * lu, g + eps * lv
            u, v = np.ones(len(f)), np.ones(len(g))
            K = np.exp((f[:, None] + g[None, :] - C) / eps)
    return f + eps * np.log(u), g + eps * np.log(v), it, err
