"""Geometry-aware Fourier neural operator on point clouds.

Spectral convolutions use a nonuniform DFT by direct summation over the
points, so the layers run on scattered coordinates and can be evaluated at
arbitrary query locations.  Coordinates are expected in the normalized
reference box (roughly [-0.5, 0.5]^3, wider for large parts); the Fourier
basis has period 1 and the spectral layers shrink coordinates by
``coord_scale`` so that no part wraps around.

Arrays are torch float64 tensors with optional leading batch dimensions:
values ``(..., N, C)``, coordinates ``(..., N, 3)``.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import kernels

DTYPE = torch.float64


@dataclass(frozen=True)
class OperatorConfig:
    width: int = 32
    n_layers: int = 4
    modes: tuple[int, int, int] = (8, 8, 4)
    c_in: int = 8
    c_out: int = 1
    proj_hidden: int = 64
    # spectral layers see coordinates * coord_scale, keeping parts up to twice
    # the median size inside one period of the Fourier basis
    coord_scale: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "modes", tuple(int(m) for m in self.modes))
        if not self.coord_scale > 0:
            raise ValueError(f"coord_scale must be positive, got {self.coord_scale}")
        if self.n_layers < 1:
            raise ValueError("n_layers must be at least 1")
        if self.c_out not in (1, 3):
            raise ValueError(f"c_out must be 1 (main) or 3 (multi), got {self.c_out}")
        if len(self.modes) != 3 or min(self.modes) < 0:
            raise ValueError(f"modes must be three non-negative counts, got {self.modes}")


@dataclass
class OperatorParams:
    config: OperatorConfig
    tensors: dict[str, torch.Tensor] = field(default_factory=dict)

    def layer(self, t: int):
        p = self.tensors
        return p[f"layer{t}.w"], p[f"layer{t}.r"], p[f"layer{t}.b"]


def mode_set(modes) -> np.ndarray:
    """All integer triples in [-mx..mx] x [-my..my] x [-mz..mz], lexicographic.

    With this ordering the negation of mode ``i`` is mode ``M - 1 - i`` and
    the zero mode sits at ``(M - 1) // 2``.
    """
    ranges = [range(-m, m + 1) for m in modes]
    return np.array(list(itertools.product(*ranges)), dtype=np.float64)


def init_operator_params(config: OperatorConfig, seed: int = 0) -> OperatorParams:
    g = torch.Generator().manual_seed(int(seed))
    d, M = config.width, len(mode_set(config.modes))

    def dense(i, o):
        return torch.randn(i, o, generator=g, dtype=DTYPE) / math.sqrt(i)

    p = {"lift.w": dense(config.c_in, d), "lift.b": torch.zeros(d, dtype=DTYPE)}
    for t in range(config.n_layers):
        p[f"layer{t}.w"] = dense(d, d)
        # (M, d, d, 2): real and imaginary parts of the per-mode channel mixer
        p[f"layer{t}.r"] = torch.rand(M, d, d, 2, generator=g, dtype=DTYPE) / (d * d)
        p[f"layer{t}.b"] = torch.zeros(d, dtype=DTYPE)
    p["proj.w1"] = dense(d, config.proj_hidden)
    p["proj.b1"] = torch.zeros(config.proj_hidden, dtype=DTYPE)
    p["proj.w2"] = dense(config.proj_hidden, config.c_out)
    p["proj.b2"] = torch.zeros(config.c_out, dtype=DTYPE)
    return OperatorParams(config=config, tensors=p)


@dataclass
class OperatorInput:
    """Per-point operator inputs.

    ``mapped`` are reference-domain coordinates (the DFT runs on them);
    ``query`` are output locations in the same reference frame, defaulting
    to the input points.
    """

    stress: torch.Tensor  # (..., N, 2), standardized
    mapped: torch.Tensor  # (..., N, 3)
    original: torch.Tensor  # (..., N, 3)
    query: torch.Tensor | None = None

    def __post_init__(self):
        self.stress = torch.as_tensor(self.stress, dtype=DTYPE)
        self.mapped = torch.as_tensor(self.mapped, dtype=DTYPE)
        self.original = torch.as_tensor(self.original, dtype=DTYPE)
        if self.query is not None:
            self.query = torch.as_tensor(self.query, dtype=DTYPE)
        n = self.stress.shape[-2]
        if self.mapped.shape[-2] != n or self.original.shape[-2] != n:
            raise ValueError("stress, mapped and original must have the same point count")

    def channels(self) -> torch.Tensor:
        return torch.cat([self.stress, self.mapped, self.original], dim=-1)

    def ablated(self) -> "OperatorInput":
        """Mapped coordinates replaced by a copy of the original coordinates."""
        return OperatorInput(self.stress, self.original, self.original, self.query)


def lift(channels: torch.Tensor, params: OperatorParams) -> torch.Tensor:
    c_in = params.config.c_in
    if channels.shape[-1] != c_in:
        raise ValueError(f"expected {c_in} input channels, got {channels.shape[-1]}")
    return channels @ params.tensors["lift.w"] + params.tensors["lift.b"]


def _phase(coords: torch.Tensor, ks: torch.Tensor) -> torch.Tensor:
    return 2.0 * math.pi * (coords @ ks.T)


def geo_dft(values, coords, modes) -> torch.Tensor:
    """F[k] = (1/N) sum_i v_i exp(-2 pi i k.x_i) over the full mode set, shape (..., M, C)."""
    values = torch.as_tensor(values, dtype=DTYPE)
    coords = torch.as_tensor(coords, dtype=DTYPE)
    ks = torch.as_tensor(mode_set(modes), dtype=DTYPE)
    th = _phase(coords, ks)
    n = values.shape[-2]
    re = torch.cos(th).transpose(-1, -2) @ values / n
    im = -(torch.sin(th).transpose(-1, -2) @ values) / n
    return torch.complex(re, im)


def geo_idft(coeffs, query, modes, return_imag: bool = False):
    """v(x) = Re sum_k F[k] exp(+2 pi i k.x) at the query points."""
    coeffs = torch.as_tensor(coeffs)
    query = torch.as_tensor(query, dtype=DTYPE)
    ks = torch.as_tensor(mode_set(modes), dtype=DTYPE)
    th = _phase(query, ks)
    c, s = torch.cos(th), torch.sin(th)
    re = c @ coeffs.real - s @ coeffs.imag
    if return_imag:
        return re, s @ coeffs.real + c @ coeffs.imag
    return re


def symmetrized_weights(r: torch.Tensor):
    """Per-mode mixers with R[-k] = conj(R[k]); returns (real, imag) of shape (M, d, d)."""
    rr, ri = r[..., 0], r[..., 1]
    rr = 0.5 * (rr + rr.flip(0))
    ri = 0.5 * (ri - ri.flip(0))
    return rr, ri


def spectral_conv(latent, coords, r, modes, query=None, half: bool = True):
    """IDFT(R (x) DFT(latent)) evaluated at ``query`` (default: the input points).

    ``half=True`` sums only the zero mode and one of each +-k pair, which is
    exact because the coefficients of a real signal under symmetrized
    weights are conjugate-symmetric.
    """
    query = coords if query is None else query
    ks_all = torch.as_tensor(mode_set(modes), dtype=DTYPE)
    rr, ri = symmetrized_weights(r)
    M = len(ks_all)
    if half:
        sel = slice((M - 1) // 2, M)
        ks, rr, ri = ks_all[sel], rr[sel], ri[sel]
        wk = torch.full((len(ks),), 2.0, dtype=DTYPE)
        wk[0] = 1.0
    else:
        ks, wk = ks_all, torch.ones(M, dtype=DTYPE)
    n = latent.shape[-2]
    th = _phase(coords, ks)
    c, s = torch.cos(th), torch.sin(th)
    fr = c.transpose(-1, -2) @ latent / n  # (..., M, d)
    fi = -(s.transpose(-1, -2) @ latent) / n
    gr = torch.einsum("...mi,mio->...mo", fr, rr) - torch.einsum("...mi,mio->...mo", fi, ri)
    gi = torch.einsum("...mi,mio->...mo", fr, ri) + torch.einsum("...mi,mio->...mo", fi, rr)
    gr = gr * wk[:, None]
    gi = gi * wk[:, None]
    if query is not coords:
        th = _phase(query, ks)
        c, s = torch.cos(th), torch.sin(th)
    return c @ gr - s @ gi


def gelu(x):
    return F.gelu(x)


def fourier_layer(latent, coords, layer, modes, activation=gelu, query=None, query_latent=None):
    """activation(W h + K h + b) with K the spectral convolution.

    ``query_latent`` supplies the pointwise term at query points that are
    not input points.
    """
    w, r, b = layer
    if latent.shape[-1] != w.shape[0]:
        raise ValueError(f"latent width {latent.shape[-1]} != layer width {w.shape[0]}")
    local = latent if query is None else query_latent
    out = local @ w + spectral_conv(latent, coords, r, modes, query=query) + b
    return activation(out)


def _nearest_input(coords: torch.Tensor, query: torch.Tensor) -> torch.Tensor:
    """Index of the nearest input point for every query (batch-aware)."""
    c = coords.detach().cpu().numpy()
    q = query.detach().cpu().numpy()
    if c.ndim == 2:
        return torch.as_tensor(kernels.knn_query(q, c, 1)[:, 0])
    flat = [kernels.knn_query(qi, ci, 1)[:, 0] for qi, ci in zip(q.reshape(-1, *q.shape[-2:]), c.reshape(-1, *c.shape[-2:]))]
    return torch.as_tensor(np.stack(flat).reshape(*q.shape[:-1]))


def forward(params: OperatorParams, inp: OperatorInput) -> torch.Tensor:
    """Deformation channels at the query points, shape (..., Q, c_out)."""
    cfg = params.config
    coords = inp.mapped * cfg.coord_scale
    h = lift(inp.channels(), params)
    T = cfg.n_layers
    for t in range(T - 1):
        h = fourier_layer(h, coords, params.layer(t), cfg.modes)
    if inp.query is None:
        h = fourier_layer(h, coords, params.layer(T - 1), cfg.modes)
    else:
        query = inp.query * cfg.coord_scale
        idx = _nearest_input(coords, query)
        hq = torch.gather(h, -2, idx.unsqueeze(-1).expand(*idx.shape, h.shape[-1]))
        h = fourier_layer(h, coords, params.layer(T - 1), cfg.modes, query=query, query_latent=hq)
    p = params.tensors
    return gelu(h @ p["proj.w1"] + p["proj.b1"]) @ p["proj.w2"] + p["proj.b2"]


def relative_l2_loss(pred, label) -> torch.Tensor:
    """||pred - label|| / ||label|| per sample over all channels, averaged over the batch."""
    pred = torch.as_tensor(pred, dtype=DTYPE)
    label = torch.as_tensor(label, dtype=DTYPE)
    if pred.shape != label.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(label.shape)}")
    dims = (-2, -1)
    den = torch.linalg.vector_norm(label, dim=dims)
    if torch.any(den == 0):
        raise ValueError("label has zero norm; degenerate samples must be excluded")
    return (torch.linalg.vector_norm(pred - label, dim=dims) / den).mean()


@dataclass
class ChannelScaler:
    """Per-channel affine standardization fitted on a training split."""

    stress_mean: np.ndarray
    stress_std: np.ndarray
    defo_mean: np.ndarray
    defo_std: np.ndarray

    def transform_stress(self, s):
        return (np.asarray(s) - self.stress_mean) / self.stress_std

    def inverse_stress(self, s):
        return np.asarray(s) * self.stress_std + self.stress_mean

    def transform_deformation(self, u, channels=slice(None)):
        return (u - self.defo_mean[channels]) / self.defo_std[channels]

    def inverse_deformation(self, u, channels=slice(None)):
        """Works on numpy arrays and (differentiably) on tensors."""
        m, s = self.defo_mean[channels], self.defo_std[channels]
        if isinstance(u, torch.Tensor):
            m, s = torch.as_tensor(m, dtype=u.dtype), torch.as_tensor(s, dtype=u.dtype)
        return u * s + m

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("stress_mean", "stress_std", "defo_mean", "defo_std")}

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelScaler":
        return cls(**{k: np.asarray(v, dtype=np.float64) for k, v in d.items()})


def _fit(arr: np.ndarray, names) -> tuple[np.ndarray, np.ndarray]:
    mean = arr.mean(0)
    std = arr.std(0)
    for j, name in enumerate(names):
        if not std[j] > 0:
            warnings.warn(f"channel {name} has zero variance; left unscaled", stacklevel=3)
            mean[j], std[j] = 0.0, 1.0
    return mean, std


def standardize_channels(samples) -> ChannelScaler:
    """Fit stress and deformation standardization on ``samples`` (the train split)."""
    samples = list(samples)
    if not samples:
        raise ValueError("standardization needs a non-empty training split")
    s = np.concatenate([x.stress for x in samples])
    u = np.concatenate([x.deformation for x in samples])
    sm, ss = _fit(s, ("sigma_xx", "sigma_yy"))
    um, us = _fit(u, ("u_x", "u_y", "u_z"))
    return ChannelScaler(sm, ss, um, us)
