# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: exact kNN, farthest-point ordering, log-domain Sinkhorn."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, fabs, INFINITY
from scipy.linalg.cython_blas cimport dgemv

cnp.import_array()


cdef inline bint _before(double da, long ia, double db, long ib) nogil:
    return da < db or (da == db and ia < ib)


def knn_query(double[:, ::1] query, double[:, ::1] ref, int k, long[::1] exclude):
    """k nearest rows of ``ref`` for every row of ``query``.

    Squared Euclidean distance, ascending, ties broken by lower index.
    ``exclude[i]`` (or -1) is a ref index skipped for query row i.
    """
    cdef Py_ssize_t m = query.shape[0], n = ref.shape[0], dim = query.shape[1]
    cdef Py_ssize_t i, j, c, pos
    cdef double d, diff
    out_idx = np.empty((m, k), dtype=np.int64)
    cdef long[:, ::1] oi = out_idx
    cdef double[::1] bd = np.empty(k, dtype=np.float64)
    cdef long[::1] bi = np.empty(k, dtype=np.int64)
    cdef int filled
    with nogil:
        for i in range(m):
            filled = 0
            for j in range(n):
                if j == exclude[i]:
                    continue
                d = 0.0
                for c in range(dim):
                    diff = query[i, c] - ref[j, c]
                    d = d + diff * diff
                if filled == k and not _before(d, j, bd[k - 1], bi[k - 1]):
                    continue
                # insertion into the sorted buffer
                if filled < k:
                    pos = filled
                    filled = filled + 1
                else:
                    pos = k - 1
                while pos > 0 and _before(d, j, bd[pos - 1], bi[pos - 1]):
                    bd[pos] = bd[pos - 1]
                    bi[pos] = bi[pos - 1]
                    pos = pos - 1
                bd[pos] = d
                bi[pos] = j
            for c in range(k):
                oi[i, c] = bi[c]
    return out_idx


def farthest_point_order(double[:, ::1] pts, int n, long start):
    """Greedy max-min ordering of ``n`` rows starting at ``start``."""
    cdef Py_ssize_t N = pts.shape[0], dim = pts.shape[1]
    cdef Py_ssize_t s, j, c, best
    cdef double d, diff, bestd
    order = np.empty(n, dtype=np.int64)
    cdef long[::1] o = order
    cdef double[::1] mind = np.full(N, INFINITY)
    cdef long cur = start
    with nogil:
        for s in range(n):
            o[s] = cur
            best = -1
            bestd = -1.0
            for j in range(N):
                d = 0.0
                for c in range(dim):
                    diff = pts[j, c] - pts[cur, c]
                    d = d + diff * diff
                if d < mind[j]:
                    mind[j] = d
                if mind[j] > bestd:
                    bestd = mind[j]
                    best = j
            cur = best
    return order


cdef void _kernel(double[:, ::1] C, double[::1] f, double[::1] g, double inv,
                  double[:, ::1] K) noexcept nogil:
    cdef Py_ssize_t i, j
    for i in range(C.shape[0]):
        for j in range(C.shape[1]):
            K[i, j] = exp((f[i] + g[j] - C[i, j]) * inv)


cdef void _log_rows(double[:, ::1] C, double[::1] f, double[::1] g, double inv,
                    double[::1] log_mu, double eps) noexcept nogil:
    # exact log-domain row update f_i = eps*(log mu_i - lse_j((g_j - C_ij)/eps))
    cdef Py_ssize_t i, j
    cdef double mx, s, v
    for i in range(C.shape[0]):
        mx = -INFINITY
        for j in range(C.shape[1]):
            v = (g[j] - C[i, j]) * inv
            if v > mx:
                mx = v
        s = 0.0
        for j in range(C.shape[1]):
            s = s + exp((g[j] - C[i, j]) * inv - mx)
        f[i] = eps * (log_mu[i] - mx - log(s))


cdef void _log_cols(double[:, ::1] C, double[::1] f, double[::1] g, double inv,
                    double[::1] log_nu, double eps) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef double mx, s, v
    for j in range(C.shape[1]):
        mx = -INFINITY
        for i in range(C.shape[0]):
            v = (f[i] - C[i, j]) * inv
            if v > mx:
                mx = v
        s = 0.0
        for i in range(C.shape[0]):
            s = s + exp((f[i] - C[i, j]) * inv - mx)
        g[j] = eps * (log_nu[j] - mx - log(s))


cdef void _matvec(double[:, ::1] K, double[::1] x, double[::1] out,
                  bint rows) noexcept nogil:
    cdef int m = <int>K.shape[1], n = <int>K.shape[0], one = 1
    cdef double alpha = 1.0, beta = 0.0
    cdef char trans = b'T' if rows else b'N'
    dgemv(&trans, &m, &n, &alpha, &K[0, 0], &m, &x[0], &one, &beta, &out[0], &one)


def sinkhorn_log(double[:, ::1] C, double[::1] log_mu, double[::1] log_nu,
                 double eps, int max_iters, double tol,
                 double[::1] f0, double[::1] g0, double absorb=30.0):
    """Log-stabilized Sinkhorn-Knopp. Returns (f, g, iters, err).

    Potentials live in the log domain; between absorptions the iteration
    runs on scalings u, v against the cached kernel exp((f+g-C)/eps) and
    folds them back into (f, g) once |log u| or |log v| exceeds ``absorb``.
    ``err`` is the max row-marginal violation after the last column update.
    """
    cdef Py_ssize_t n = C.shape[0], m = C.shape[1], i, j
    f_arr = np.array(f0, dtype=np.float64, copy=True)
    g_arr = np.array(g0, dtype=np.float64, copy=True)
    K_arr = np.empty((n, m), dtype=np.float64)
    cdef double[::1] f = f_arr
    cdef double[::1] g = g_arr
    cdef double[:, ::1] K = K_arr
    cdef double[::1] u = np.ones(n)
    cdef double[::1] v = np.ones(m)
    cdef double[::1] mu = np.exp(np.asarray(log_mu))
    cdef double[::1] nu = np.exp(np.asarray(log_nu))
    cdef double[::1] kv = np.empty(n)
    cdef double[::1] ktu = np.empty(m)
    cdef double inv = 1.0 / eps, s, err = INFINITY, big
    cdef int it = 0
    cdef bint bad
    with nogil:
        _log_rows(C, f, g, inv, log_mu, eps)
        _log_cols(C, f, g, inv, log_nu, eps)
        it = 1
        _kernel(C, f, g, inv, K)
        while True:
            # K is row-major n x m, i.e. column-major m x n for BLAS
            _matvec(K, v, kv, True)
            err = 0.0
            for i in range(n):
                s = fabs(u[i] * kv[i] - mu[i])
                if s > err:
                    err = s
            if err < tol or it >= max_iters:
                break
            bad = False
            for i in range(n):
                if kv[i] > 0.0:
                    u[i] = mu[i] / kv[i]
                else:
                    bad = True
            _matvec(K, u, ktu, False)
            for j in range(m):
                if ktu[j] > 0.0:
                    v[j] = nu[j] / ktu[j]
                else:
                    bad = True
            it = it + 1
            big = 0.0
            for i in range(n):
                if not (u[i] > 0.0 and u[i] < INFINITY):
                    bad = True
                elif fabs(log(u[i])) > big:
                    big = fabs(log(u[i]))
            for j in range(m):
                if not (v[j] > 0.0 and v[j] < INFINITY):
                    bad = True
                elif fabs(log(v[j])) > big:
                    big = fabs(log(v[j]))
            if bad:
                # scalings broke down: redo the step exactly in the log domain
                _log_rows(C, f, g, inv, log_mu, eps)
                _log_cols(C, f, g, inv, log_nu, eps)
                for i in range(n):
                    u[i] = 1.0
                for j in range(m):
                    v[j] = 1.0
                _kernel(C, f, g, inv, K)
            elif big > absorb:
                for i in range(n):
                    f[i] = f[i] + eps * log(u[i])
                    u[i] = 1.0
                for j in range(m):
                    g[j] = g[j] + eps * log(v[j])
                    v[j] = 1.0
                _kernel(C, f, g, inv, K)
        for i in range(n):
            f[i] = f[i] + eps * log(u[i])
        for j in range(m):
            g[j] = g[j] + eps * log(v[j])
    return f_arr, g_arr, it, err
