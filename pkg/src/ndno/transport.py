"""Entropic optimal transport between point clouds, and an exact small-case oracle.

The Sinkhorn value reported everywhere is the transport cost <P, C> of the
entropic plan P (no entropy term, no debiasing).  Its gradient with respect
to the cost matrix is obtained by implicit differentiation of the converged
potentials, which makes it exact up to the marginal tolerance.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from . import kernels
from .geometry import PointCloud, SpecError


class NumericError(FloatingPointError):
    """A computation produced non-finite values."""


DEFAULT_EPS_SCALE = 0.01
DEFAULT_MAX_ITERS = 500
DEFAULT_TOL = 1e-6


def _pts(x) -> np.ndarray:
    if isinstance(x, PointCloud):
        return x.points
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def pairwise_cost(A, B) -> np.ndarray:
    """C[i, j] = ||a_i - b_j||^2."""
    a, b = _pts(A), _pts(B)
    if len(a) == 0 or len(b) == 0:
        raise SpecError("pairwise_cost needs two non-empty clouds")
    return ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)


@dataclass
class TransportProblem:
    cost: np.ndarray
    mu: np.ndarray
    nu: np.ndarray
    epsilon: float
    max_iters: int = DEFAULT_MAX_ITERS
    tol: float = DEFAULT_TOL

    def __post_init__(self):
        self.cost = np.asarray(self.cost, dtype=np.float64)
        if not np.all(np.isfinite(self.cost)):
            raise NumericError("cost matrix has non-finite entries")
        if np.any(self.cost < 0):
            raise SpecError("cost entries must be non-negative")
        if not self.epsilon > 0:
            raise SpecError(f"epsilon must be positive, got {self.epsilon}")

    @classmethod
    def uniform(cls, cost, epsilon, **kw) -> "TransportProblem":
        n, m = np.shape(cost)
        return cls(cost, np.full(n, 1.0 / n), np.full(m, 1.0 / m), epsilon, **kw)


@dataclass
class TransportResult:
    plan: np.ndarray
    cost_value: float
    iters_used: int
    converged: bool
    f: np.ndarray
    g: np.ndarray
    epsilon: float
    marginal_error: float

    def log_plan(self, cost: np.ndarray) -> np.ndarray:
        return (self.f[:, None] + self.g[None, :] - cost) / self.epsilon


NEWTON_MAX_SIZE = 1500


def _residual(f, g, C, mu, nu, eps) -> float:
    with np.errstate(over="ignore"):
        P = np.exp((f[:, None] + g[None, :] - C) / eps)
    res = np.concatenate([P.sum(1) - mu, P.sum(0) - nu])
    return float(np.linalg.norm(res)) if np.all(np.isfinite(res)) else np.inf


def _newton_polish(C, mu, nu, eps, f, g, tol, max_steps=30):
    """Newton steps on the dual; quadratic convergence where Sinkhorn crawls (small eps)."""
    n, m = C.shape
    steps = 0
    for _ in range(max_steps):
        P = np.exp((f[:, None] + g[None, :] - C) / eps)
        r, c = P.sum(1), P.sum(0)
        if max(np.abs(r - mu).max(), np.abs(c - nu).max()) < tol:
            break
        H = np.zeros((n + m, n + m))
        H[:n, :n] = np.diag(r)
        H[:n, n:] = P
        H[n:, :n] = P.T
        H[n:, n:] = np.diag(c)
        rhs = eps * np.concatenate([mu - r, nu - c])
        # minimum-norm step: a near-sparse plan leaves several gauge directions
        try:
            d = np.linalg.lstsq(H, rhs, rcond=1e-14)[0]
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(d)):
            break
        # backtracking on the marginal residual; the dual value itself is
        # too flat to compare in floating point once the plan is near-sparse
        base = _residual(f, g, C, mu, nu, eps)
        alpha = 1.0
        while alpha > 1e-6:
            fn, gn = f + alpha * d[:n], g + alpha * d[n:]
            if _residual(fn, gn, C, mu, nu, eps) < base:
                break
            alpha *= 0.5
        else:
            break
        f, g = fn, gn
        steps += 1
    return f, g, steps


def sinkhorn(problem: TransportProblem, f0=None, g0=None) -> TransportResult:
    """Log-stabilized Sinkhorn; small problems that stall get Newton refinement."""
    C, eps = problem.cost, problem.epsilon
    f, g, it, _ = kernels.sinkhorn_log(
        C, np.log(problem.mu), np.log(problem.nu), eps, problem.max_iters, problem.tol, f0, g0
    )

    def marg(f, g):
        P = np.exp((f[:, None] + g[None, :] - C) / eps)
        return P, max(np.abs(P.sum(1) - problem.mu).max(), np.abs(P.sum(0) - problem.nu).max())

    P, err = marg(f, g)
    if not err < problem.tol and sum(C.shape) <= NEWTON_MAX_SIZE and np.all(np.isfinite(P)):
        f2, g2, steps = _newton_polish(C, problem.mu, problem.nu, eps, f, g, problem.tol)
        P2, err2 = marg(f2, g2)
        if err2 < err:
            f, g, P, err = f2, g2, P2, err2
            it += steps
    if not np.all(np.isfinite(P)):
        raise NumericError("Sinkhorn produced a non-finite plan")
    return TransportResult(
        plan=P,
        cost_value=float((P * C).sum()),
        iters_used=int(it),
        converged=bool(err < problem.tol),
        f=f,
        g=g,
        epsilon=eps,
        marginal_error=float(err),
    )


def resolve_epsilon(cost: np.ndarray, epsilon=None, eps_scale=DEFAULT_EPS_SCALE) -> float:
    if epsilon is not None:
        return float(epsilon)
    eps = eps_scale * float(np.mean(cost))
    if not eps > 0:
        # identical single-location clouds: any positive epsilon gives a zero cost
        eps = eps_scale
    return eps


def sinkhorn_distance(
    A,
    B,
    epsilon: float | None = None,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float = DEFAULT_TOL,
    eps_scale: float = DEFAULT_EPS_SCALE,
) -> TransportResult:
    """Entropic OT between uniform clouds; ``epsilon`` defaults to ``eps_scale * mean(C)``."""
    C = pairwise_cost(A, B)
    eps = resolve_epsilon(C, epsilon, eps_scale)
    return sinkhorn(TransportProblem.uniform(C, eps, max_iters=max_iters, tol=tol))


def cost_gradient(result: TransportResult, cost: np.ndarray, eps_scale: float | None = None) -> np.ndarray:
    """d<P, C>/dC for the converged entropic plan.

    Linearizing the marginal constraints around the optimal potentials gives
    a (n+m) system whose adjoint solve yields

        dS/dC_ij = P_ij + G_ij,   G_ij = P_ij (lam_i + kap_j - C_ij) / eps,

    plus, when eps = eps_scale * mean(C), the extra term
    eps_scale / (n m) * sum(G * log P) on every entry.
    """
    P, eps = result.plan, result.epsilon
    n, m = P.shape
    r, c = P.sum(1), P.sum(0)
    PC = P * cost
    H = np.zeros((n + m, n + m))
    H[:n, :n] = np.diag(r)
    H[:n, n:] = P
    H[n:, :n] = P.T
    H[n:, n:] = np.diag(c)
    rhs = np.concatenate([PC.sum(1), PC.sum(0)])
    # the system is singular along (1, -1); pin the last column potential
    z = np.zeros(n + m)
    try:
        z[:-1] = np.linalg.solve(H[:-1, :-1], rhs[:-1])
    except np.linalg.LinAlgError:
        z[:-1] = np.linalg.lstsq(H[:-1, :-1], rhs[:-1], rcond=None)[0]
    lam, kap = z[:n], z[n:]
    G = P * (lam[:, None] + kap[None, :] - cost) / eps
    grad = P + G
    if eps_scale is not None:
        grad = grad + eps_scale / (n * m) * np.sum(G * result.log_plan(cost))
    return grad


class _SinkhornValue(torch.autograd.Function):
    @staticmethod
    def forward(ctx, C, epsilon, eps_scale, max_iters, tol, warm):
        Cn = C.detach().cpu().numpy()
        if not np.all(np.isfinite(Cn)):
            raise NumericError("non-finite cost matrix in Sinkhorn loss")
        eps = resolve_epsilon(Cn, epsilon, eps_scale)
        f0 = g0 = None
        if warm is not None and warm.get("f") is not None and warm["f"].shape == (Cn.shape[0],):
            f0, g0 = warm["f"], warm["g"]
        res = sinkhorn(TransportProblem.uniform(Cn, eps, max_iters=max_iters, tol=tol), f0, g0)
        if warm is not None:
            warm["f"], warm["g"] = res.f, res.g
            warm["result"] = res
        grad = cost_gradient(res, Cn, None if epsilon is not None else eps_scale)
        ctx.save_for_backward(torch.as_tensor(grad, dtype=C.dtype))
        return C.new_tensor(res.cost_value)

    @staticmethod
    def backward(ctx, grad_out):
        (grad,) = ctx.saved_tensors
        return grad_out * grad, None, None, None, None, None


def torch_pairwise_cost(X: torch.Tensor, Y: torch.Tensor) -> torch.Tensor:
    return ((X[:, None, :] - Y[None, :, :]) ** 2).sum(-1)


def sinkhorn_loss(
    X: torch.Tensor,
    Y: torch.Tensor,
    epsilon: float | None = None,
    eps_scale: float = DEFAULT_EPS_SCALE,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float = DEFAULT_TOL,
    warm: dict | None = None,
) -> torch.Tensor:
    """Differentiable Sinkhorn transport cost between two torch point sets.

    ``warm`` is an optional dict carrying potentials between calls.
    """
    C = torch_pairwise_cost(X, Y)
    return _SinkhornValue.apply(C, epsilon, eps_scale, max_iters, tol, warm)


def _assignment_enumerate(C: np.ndarray) -> float:
    n = len(C)
    if n == 1:
        return float(C[0, 0])
    rows = np.arange(n)
    best = np.inf
    # fix the first row's partner and enumerate the rest in blocks
    for first in range(n):
        rest = [j for j in range(n) if j != first]
        perms = np.array(list(itertools.permutations(rest)), dtype=np.int64).reshape(-1, n - 1)
        costs = C[0, first] + C[rows[1:], perms].sum(1)
        best = min(best, float(costs.min()))
    return best


def exact_ot_bruteforce(A, B, method: str = "enumerate") -> float:
    """Exact OT cost between equal-size uniform clouds (n <= 10).

    Equal uniform weights make the LP optimum a permutation, so this is the
    minimum assignment cost divided by n.  ``method`` is ``"enumerate"``
    (all permutations) or ``"matching"`` (Hungarian algorithm).
    """
    a, b = _pts(A), _pts(B)
    if len(a) != len(b):
        raise SpecError(f"exact OT needs equal sizes, got {len(a)} and {len(b)}")
    if not 1 <= len(a) <= 10:
        raise SpecError(f"exact OT supports 1..10 points, got {len(a)}")
    C = pairwise_cost(a, b)
    if method == "enumerate":
        total = _assignment_enumerate(C)
    elif method == "matching":
        r, c = linear_sum_assignment(C)
        total = float(C[r, c].sum())
    else:
        raise SpecError(f"unknown method {method!r}")
    return total / len(a)


def write_plan_csv(result: TransportResult, path) -> None:
    """Dump a plan as (i, j, mass) rows, skipping exact zeros."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "mass"])
        for i, j in zip(*np.nonzero(result.plan)):
            w.writerow([int(i), int(j), repr(float(result.plan[i, j]))])
