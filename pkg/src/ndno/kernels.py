"""Kernel backend selection.

The compiled extension is used when it imports; set ``NDNO_PURE_PYTHON=1``
to force the numpy fallback.
"""

import os

import numpy as np

if os.environ.get("NDNO_PURE_PYTHON", "") not in ("", "0"):
    from . import _kernels_py as _impl

    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        from . import _kernels_py as _impl

        BACKEND = "python"


def knn_query(query, ref, k, exclude=None):
    query = np.ascontiguousarray(query, dtype=np.float64)
    ref = np.ascontiguousarray(ref, dtype=np.float64)
    if exclude is None:
        exclude = np.full(len(query), -1, dtype=np.int64)
    exclude = np.ascontiguousarray(exclude, dtype=np.int64)
    if k > len(ref) - (1 if (exclude >= 0).any() else 0):
        raise ValueError(f"k={k} exceeds the number of candidate points")
    return _impl.knn_query(query, ref, int(k), exclude)


def farthest_point_order(points, n, start):
    points = np.ascontiguousarray(points, dtype=np.float64)
    return _impl.farthest_point_order(points, int(n), int(start))


def sinkhorn_log(C, log_mu, log_nu, eps, max_iters, tol, f0=None, g0=None):
    C = np.ascontiguousarray(C, dtype=np.float64)
    n, m = C.shape
    f0 = np.zeros(n) if f0 is None else np.ascontiguousarray(f0, dtype=np.float64)
    g0 = np.zeros(m) if g0 is None else np.ascontiguousarray(g0, dtype=np.float64)
    return _impl.sinkhorn_log(
        C,
        np.ascontiguousarray(log_mu, dtype=np.float64),
        np.ascontiguousarray(log_nu, dtype=np.float64),
        float(eps),
        int(max_iters),
        float(tol),
        f0,
        g0,
    )
