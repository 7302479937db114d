"""Compiled vs pure-Python kernels: wall time and agreement.

    python benchmarks/bench_kernels.py [--repeat 5] [--n 512]
"""

import argparse
import time

import numpy as np

from ndno import _kernels_py

try:
    from ndno import _kernels
except ImportError:  # pragma: no cover
    _kernels = None


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def cases(n, rng):
    pts = rng.normal(size=(n, 3))
    ex = np.arange(n, dtype=np.int64)
    a, b = rng.normal(size=(n // 4, 3)), rng.normal(size=(n // 4, 3))
    C = ((a[:, None] - b[None]) ** 2).sum(-1)
    m = len(a)
    lm = np.full(m, -np.log(m))
    eps = 0.01 * C.mean()
    z = np.zeros(m)
    return {
        "knn_query k=16": (lambda impl: impl.knn_query(pts, pts, 16, ex), lambda x, y: np.array_equal(x, y)),
        "farthest_point_order 128": (
            lambda impl: impl.farthest_point_order(pts, 128, 0),
            lambda x, y: np.array_equal(x, y),
        ),
        f"sinkhorn_log {m}x{m}": (
            lambda impl: impl.sinkhorn_log(C, lm, lm, eps, 500, 1e-12, z, z),
            lambda x, y: np.allclose(x[0], y[0], atol=1e-9) and np.allclose(x[1], y[1], atol=1e-9),
        ),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--n", type=int, default=512)
    args = ap.parse_args(argv)
    if _kernels is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':<28}{'cython (ms)':>12}{'python (ms)':>13}{'speedup':>9}  agree")
    for name, (call, same) in cases(args.n, rng).items():
        tc, oc = best_of(lambda: call(_kernels), args.repeat)
        tp, op = best_of(lambda: call(_kernels_py), args.repeat)
        print(f"{name:<28}{1e3 * tc:>12.2f}{1e3 * tp:>13.2f}{tp / tc:>8.1f}x  {same(oc, op)}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
