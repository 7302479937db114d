"""Diffeomorphic mapping network: edge convolutions, cross-attention, displacement head.

The network sees a compressed *context* of the source and target clouds
(farthest-point subsets of ``n_context`` points) and defines a displacement
field over space.  A query point x runs through the same layers as a context
point, with its neighbours' features taken from the context, so

    phi(x) = x + d(x; context)

is a smooth function of x that can be evaluated anywhere.  At the context
points it reproduces the plain dynamic-graph forward pass.  Jacobians are
derivatives of this field with respect to the query coordinate, with the
context held fixed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import kernels
from .geometry import PointCloud, SpecError, farthest_point_indices
from .transport import NumericError, sinkhorn_loss

DTYPE = torch.float64


@dataclass(frozen=True)
class DiffeoConfig:
    width: int = 64
    n_edgeconv: int = 3
    heads: int = 4
    ffn_hidden: int = 128
    proj_hidden: int = 64
    k: int = 16
    n_context: int = 128

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError(f"width {self.width} is not divisible by heads {self.heads}")


@dataclass
class DiffeoNetParams:
    config: DiffeoConfig
    tensors: dict[str, torch.Tensor] = field(default_factory=dict)


def init_diffeo_params(config: DiffeoConfig | None = None, seed: int = 0) -> DiffeoNetParams:
    """Random weights with a zero projection head, so the initial map is the identity."""
    config = config or DiffeoConfig()
    g = torch.Generator().manual_seed(int(seed))
    d = config.width

    def dense(i, o):
        return torch.randn(i, o, generator=g, dtype=DTYPE) / math.sqrt(i)

    p = {}
    for l in range(config.n_edgeconv):
        fin = 3 if l == 0 else d
        p[f"ec{l}.w"] = dense(2 * fin, d)
        p[f"ec{l}.b"] = torch.zeros(d, dtype=DTYPE)
    for name in ("wq", "wk", "wv", "wo"):
        p[f"attn.{name}"] = dense(d, d)
    p["ffn.w1"] = dense(d, config.ffn_hidden)
    p["ffn.b1"] = torch.zeros(config.ffn_hidden, dtype=DTYPE)
    p["ffn.w2"] = dense(config.ffn_hidden, d)
    p["ffn.b2"] = torch.zeros(d, dtype=DTYPE)
    p["proj.w1"] = dense(d, config.proj_hidden)
    p["proj.b1"] = torch.zeros(config.proj_hidden, dtype=DTYPE)
    p["proj.w2"] = torch.zeros(config.proj_hidden, 3, dtype=DTYPE)
    p["proj.b2"] = torch.zeros(3, dtype=DTYPE)
    return DiffeoNetParams(config=config, tensors=p)


@dataclass
class Context:
    """Per-layer features and kNN graphs of a context cloud."""

    features: list[torch.Tensor]  # input of each edge-conv layer, then the output
    graphs: list[np.ndarray]

    @property
    def points(self) -> torch.Tensor:
        return self.features[0]

    @property
    def output(self) -> torch.Tensor:
        return self.features[-1]


def _edgeconv(params: DiffeoNetParams, l: int, own, nbr, idx) -> torch.Tensor:
    # [h_i, h_j - h_i] @ W == h_i @ (W_top - W_bot) + h_j @ W_bot
    w, b = params.tensors[f"ec{l}.w"], params.tensors[f"ec{l}.b"]
    fin = w.shape[0] // 2
    if own.shape[-1] != fin:
        raise SpecError(f"edge-conv layer {l} expects width {fin}, got {own.shape[-1]}")
    a = own @ (w[:fin] - w[fin:]) + b
    nb = nbr @ w[fin:]
    idx = torch.as_tensor(idx, dtype=torch.long)
    return torch.tanh(a[:, None, :] + nb[idx]).amax(dim=1)


def _knn(query: torch.Tensor, ref: torch.Tensor, k: int, exclude) -> np.ndarray:
    return kernels.knn_query(query.detach().numpy(), ref.detach().numpy(), k, exclude)


def encode(params: DiffeoNetParams, points, k: int | None = None) -> Context:
    """Dynamic-graph edge-conv stack on a cloud; the graph is rebuilt per layer."""
    k = params.config.k if k is None else k
    h = torch.as_tensor(points, dtype=DTYPE)
    n = len(h)
    if not 0 < k < n:
        raise SpecError(f"k: need 0 < k < N={n}, got {k}")
    feats, graphs = [h], []
    self_idx = np.arange(n)
    for l in range(params.config.n_edgeconv):
        idx = _knn(h, h, k, self_idx)
        h = _edgeconv(params, l, h, h, idx)
        feats.append(h)
        graphs.append(idx)
    return Context(feats, graphs)


def edgeconv_features(cloud, graph, params: DiffeoNetParams) -> torch.Tensor:
    """Edge-conv features of every point; ``graph`` is used for the first layer."""
    pts = torch.as_tensor(cloud.points if isinstance(cloud, PointCloud) else cloud, dtype=DTYPE)
    nbrs = graph.neighbors if hasattr(graph, "neighbors") else np.asarray(graph)
    if nbrs.shape[0] != len(pts):
        raise SpecError("graph was not built on this cloud")
    k = nbrs.shape[1]
    h = _edgeconv(params, 0, pts, pts, nbrs)
    self_idx = np.arange(len(pts))
    for l in range(1, params.config.n_edgeconv):
        h = _edgeconv(params, l, h, h, _knn(h, h, k, self_idx))
    return h


def query_features(params: DiffeoNetParams, ctx: Context, query: torch.Tensor, self_index=None) -> torch.Tensor:
    """Edge-conv features at query points, neighbours drawn from the context.

    ``self_index[i]`` is the context index of query i (or -1); that context
    point is not its own neighbour.  With ``self_index=None`` the queries
    are taken to be exactly the context points and its graphs are reused.
    """
    k = ctx.graphs[0].shape[1]
    h = query
    for l in range(params.config.n_edgeconv):
        if self_index is None:
            idx = ctx.graphs[l]
        else:
            idx = _knn(h, ctx.features[l], k, self_index)
        h = _edgeconv(params, l, h, ctx.features[l], idx)
    return h


def cross_attention_match(feat_src, feat_tgt, params: DiffeoNetParams, return_weights: bool = False):
    """Multi-head attention (queries from source, keys/values from target), residual, FFN."""
    p = params.tensors
    d = p["attn.wq"].shape[0]
    if feat_src.shape[-1] != d or feat_tgt.shape[-1] != d:
        raise SpecError(f"feature widths {feat_src.shape[-1]}/{feat_tgt.shape[-1]} != {d}")
    H = params.config.heads
    dh = d // H

    def heads(x):
        return x.reshape(x.shape[0], H, dh).transpose(0, 1)

    q = heads(feat_src @ p["attn.wq"])
    k = heads(feat_tgt @ p["attn.wk"])
    v = heads(feat_tgt @ p["attn.wv"])
    w = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(dh), dim=-1)  # (H, Ns, Nt)
    att = (w @ v).transpose(0, 1).reshape(feat_src.shape[0], d) @ p["attn.wo"]
    m = feat_src + att
    m = m + torch.tanh(m @ p["ffn.w1"] + p["ffn.b1"]) @ p["ffn.w2"] + p["ffn.b2"]
    return (m, w) if return_weights else m


def project_displacement(matched, params: DiffeoNetParams) -> torch.Tensor:
    p = params.tensors
    return torch.tanh(matched @ p["proj.w1"] + p["proj.b1"]) @ p["proj.w2"] + p["proj.b2"]


@dataclass
class MappingField:
    """Encoded source/target contexts; call with query coordinates to get displacements."""

    params: DiffeoNetParams
    source: Context
    target_features: torch.Tensor
    context_index: np.ndarray  # source-cloud index of every context point

    def __call__(self, query: torch.Tensor, self_index=None) -> torch.Tensor:
        f = query_features(self.params, self.source, query, self_index)
        return project_displacement(cross_attention_match(f, self.target_features, self.params), self.params)

    def self_index_for(self, n_source: int) -> np.ndarray:
        s = np.full(n_source, -1, dtype=np.int64)
        s[self.context_index] = np.arange(len(self.context_index))
        return s


def context_indices(points: np.ndarray, n_context: int) -> np.ndarray:
    if len(points) <= n_context:
        return np.arange(len(points))
    return farthest_point_indices(points, n_context)


def build_field(params: DiffeoNetParams, src, tgt) -> MappingField:
    src_pts = src.points if isinstance(src, PointCloud) else np.asarray(src, dtype=np.float64)
    tgt_pts = tgt.points if isinstance(tgt, PointCloud) else np.asarray(tgt, dtype=np.float64)
    nc = params.config.n_context
    si = context_indices(src_pts, nc)
    ti = context_indices(tgt_pts, nc)
    src_ctx = encode(params, torch.as_tensor(src_pts[si]))
    tgt_ctx = encode(params, torch.as_tensor(tgt_pts[ti]))
    return MappingField(params, src_ctx, tgt_ctx.output, si)


def field_jacobian(fn, query, create_graph: bool = False) -> torch.Tensor:
    """(M, 3, 3) Jacobians of x -> x + fn(x) for a pointwise field ``fn``."""
    q = torch.as_tensor(query, dtype=DTYPE).detach().requires_grad_(True)
    d = fn(q)
    rows = [
        torch.autograd.grad(d[:, a].sum(), q, create_graph=create_graph, retain_graph=True)[0]
        for a in range(3)
    ]
    J = torch.stack(rows, dim=1) + torch.eye(3, dtype=DTYPE)
    return (J, d) if create_graph else J


def det3(J: torch.Tensor) -> torch.Tensor:
    return (
        J[..., 0, 0] * (J[..., 1, 1] * J[..., 2, 2] - J[..., 1, 2] * J[..., 2, 1])
        - J[..., 0, 1] * (J[..., 1, 0] * J[..., 2, 2] - J[..., 1, 2] * J[..., 2, 0])
        + J[..., 0, 2] * (J[..., 1, 0] * J[..., 2, 1] - J[..., 1, 1] * J[..., 2, 0])
    )


@dataclass
class MappingResult:
    source_points: np.ndarray
    mapped_points: np.ndarray
    jacobians: np.ndarray | None = None

    @property
    def displacement(self) -> np.ndarray:
        return self.mapped_points - self.source_points

    def __len__(self) -> int:
        return len(self.source_points)


def apply_mapping(params: DiffeoNetParams, src, tgt, with_jacobian: bool = False) -> MappingResult:
    """Map every source point: mapped = src + d(src)."""
    src_pts = src.points if isinstance(src, PointCloud) else np.asarray(src, dtype=np.float64)
    fld = build_field(params, src, tgt)
    self_idx = fld.self_index_for(len(src_pts))
    q = torch.as_tensor(src_pts)
    J = None
    with torch.no_grad():
        disp = fld(q, self_idx).numpy()
    if with_jacobian:
        J = field_jacobian(lambda x: fld(x, self_idx), q).detach().numpy()
    return MappingResult(source_points=src_pts.copy(), mapped_points=src_pts + disp, jacobians=J)


def jacobian_at_points(params: DiffeoNetParams, src, tgt, at=None) -> np.ndarray:
    """Jacobians of the mapping at the selected source points (default: all)."""
    src_pts = src.points if isinstance(src, PointCloud) else np.asarray(src, dtype=np.float64)
    at = np.arange(len(src_pts)) if at is None else np.asarray(at, dtype=np.int64)
    fld = build_field(params, src, tgt)
    self_idx = fld.self_index_for(len(src_pts))[at]
    J = field_jacobian(lambda x: fld(x, self_idx), torch.as_tensor(src_pts[at])).detach().numpy()
    bad = np.nonzero(~np.isfinite(J).all(axis=(1, 2)))[0]
    if len(bad):
        raise NumericError(f"non-finite Jacobian at point {int(at[bad[0]])}")
    return J


def _as_tensor(J) -> torch.Tensor:
    return J if isinstance(J, torch.Tensor) else torch.as_tensor(np.asarray(J, dtype=np.float64))


def loss_inv(jacobians) -> torch.Tensor:
    """Mean of relu(-det J): penalizes folding and inversion."""
    J = _as_tensor(jacobians)
    if J.shape[0] < 1:
        raise SpecError("loss_inv needs at least one Jacobian")
    return torch.relu(-det3(J)).mean()


def loss_smooth(jacobians) -> torch.Tensor:
    """Sum over points of ||J - I||_F^2."""
    J = _as_tensor(jacobians)
    if J.shape[0] < 1:
        raise SpecError("loss_smooth needs at least one Jacobian")
    return ((J - torch.eye(3, dtype=J.dtype)) ** 2).sum()


@dataclass
class DiffeoLossReport:
    l_inv: object
    l_smooth: object
    l_sim: object
    beta1: float
    beta2: float
    beta3: float
    total: object = None

    def __post_init__(self):
        self.total = self.beta1 * self.l_inv + self.beta2 * self.l_smooth + self.beta3 * self.l_sim

    def as_floats(self) -> dict:
        f = lambda v: float(v.detach()) if isinstance(v, torch.Tensor) else float(v)  # noqa: E731
        return {"l_inv": f(self.l_inv), "l_smooth": f(self.l_smooth), "l_sim": f(self.l_sim), "total": f(self.total)}


def loss_total(jacobians, sim, beta1: float, beta2: float, beta3: float) -> DiffeoLossReport:
    if min(beta1, beta2, beta3) < 0:
        raise SpecError("loss coefficients must be non-negative")
    return DiffeoLossReport(loss_inv(jacobians), loss_smooth(jacobians), sim, beta1, beta2, beta3)


def mapping_loss(
    params: DiffeoNetParams,
    src_pts: np.ndarray,
    tgt_pts: np.ndarray,
    betas: tuple[float, float, float],
    eps_scale: float = 0.01,
    sinkhorn_kw: dict | None = None,
    warm: dict | None = None,
) -> DiffeoLossReport:
    """Differentiable training loss on the context points of one (source, target) pair."""
    fld = build_field(params, src_pts, tgt_pts)
    q0 = fld.source.points
    J, disp = field_jacobian(lambda x: fld(x), q0, create_graph=True)
    tgt_ctx = torch.as_tensor(np.asarray(tgt_pts)[context_indices(np.asarray(tgt_pts), params.config.n_context)])
    sim = sinkhorn_loss(q0 + disp, tgt_ctx, eps_scale=eps_scale, warm=warm, **(sinkhorn_kw or {}))
    return loss_total(J, sim, *betas)


def pushforward_field(values, mapping: MappingResult) -> PointCloud:
    """Attach source-point values to the mapped points (same index order)."""
    chans = _channels(values, len(mapping))
    return PointCloud(mapping.mapped_points.copy(), chans)


def pullback_solution(values_on_reference, mapping: MappingResult) -> PointCloud:
    """Values living on the mapped points, returned on the source points."""
    chans = _channels(values_on_reference, len(mapping))
    return PointCloud(mapping.source_points.copy(), chans)


def _channels(values, n: int) -> dict:
    if isinstance(values, PointCloud):
        values = values.channels
    if isinstance(values, dict):
        out = {k: np.array(v, dtype=np.float64) for k, v in values.items()}
    else:
        arr = np.asarray(values, dtype=np.float64)
        arr = arr[:, None] if arr.ndim == 1 else arr
        out = {f"c{j}": arr[:, j].copy() for j in range(arr.shape[1])}
    for k, v in out.items():
        if len(v) != n:
            raise SpecError(f"channel {k!r}: length {len(v)} != mapping size {n}")
    return out
