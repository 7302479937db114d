"""Synthetic residual-stress profiles and an analytical plate-bending oracle.

Stress is a through-thickness cosine series

    sigma_xx(z) = sum_k a_k cos(k pi z / Lz),  sigma_yy(z) = sum_k b_k cos(k pi z / Lz)

and the deformation it releases is computed with Kirchhoff plate theory on
the local material thickness: moments about the local mid-plane give
curvatures, and the curvatures give a parabolic deflection plus the
matching in-plane rotation of plate normals.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import (
    ComponentSpec,
    DEFAULT_N_POINTS,
    PointCloud,
    SpecError,
    local_thickness,
    random_spec,
    sample_component,
)

STRESS_CHANNELS = ("sigma_xx", "sigma_yy")
DEFORMATION_CHANNELS = ("u_x", "u_y", "u_z")


@dataclass(frozen=True)
class StressProfile:
    a: np.ndarray  # sigma_xx coefficients, MPa, k = 0..K
    b: np.ndarray  # sigma_yy coefficients, MPa
    seed: int = 0

    def __post_init__(self):
        a = np.asarray(self.a, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
            raise SpecError("profile: a and b need equal length K+1 with K >= 1")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def order(self) -> int:
        return len(self.a) - 1

    def scaled(self, alpha: float) -> "StressProfile":
        return replace(self, a=alpha * self.a, b=alpha * self.b)

    def mirrored(self) -> "StressProfile":
        """Profile reflected about the mid-plane: z -> Lz - z."""
        sign = (-1.0) ** np.arange(len(self.a))
        return replace(self, a=sign * self.a, b=sign * self.b)

    def to_dict(self) -> dict:
        return {"a": self.a.tolist(), "b": self.b.tolist(), "seed": int(self.seed)}

    @classmethod
    def from_dict(cls, d: dict) -> "StressProfile":
        return cls(a=d["a"], b=d["b"], seed=d.get("seed", 0))


@dataclass(frozen=True)
class MaterialConsts:
    E: float = 70e9  # Pa
    nu: float = 0.33

    def __post_init__(self):
        if not self.E > 0:
            raise SpecError(f"E: must be positive, got {self.E}")
        if not 0 <= self.nu < 0.5:
            raise SpecError(f"nu: must lie in [0, 0.5), got {self.nu}")

    @property
    def E_mpa(self) -> float:
        return self.E * 1e-6


@dataclass
class Sample:
    spec: ComponentSpec
    cloud: PointCloud
    stress: np.ndarray  # (N, 2) MPa
    deformation: np.ndarray  # (N, 3) mm
    profile: StressProfile | None = None

    def __post_init__(self):
        n = len(self.cloud)
        self.stress = np.asarray(self.stress, dtype=np.float64)
        self.deformation = np.asarray(self.deformation, dtype=np.float64)
        if self.stress.shape != (n, 2):
            raise SpecError(f"stress: expected shape ({n}, 2), got {self.stress.shape}")
        if self.deformation.shape != (n, 3):
            raise SpecError(
                f"deformation: expected shape ({n}, 3), got {self.deformation.shape}"
            )


@dataclass(frozen=True)
class DatasetConfig:
    n_points: int = DEFAULT_N_POINTS
    order: int = 3
    bound: float = 100.0
    material: MaterialConsts = field(default_factory=MaterialConsts)


def gen_stress_profile(seed: int, K: int = 3, bound: float = 100.0) -> StressProfile:
    if K < 1:
        raise SpecError(f"K: need K >= 1, got {K}")
    if bound < 0:
        raise SpecError(f"bound: must be non-negative, got {bound}")
    rng = np.random.default_rng(int(seed))
    a = rng.uniform(-bound, bound, K + 1)
    b = rng.uniform(-bound, bound, K + 1)
    return StressProfile(a=a, b=b, seed=int(seed))


def _cos_series(coef: np.ndarray, zt: np.ndarray) -> np.ndarray:
    k = np.arange(len(coef))
    return np.cos(np.pi * np.outer(zt, k)) @ coef


def eval_stress_at_points(profile: StressProfile, cloud: PointCloud, spec: ComponentSpec) -> np.ndarray:
    """(N, 2) array of (sigma_xx, sigma_yy) at each point's normalized height z / Lz."""
    Lz = spec.dims[2]
    z = cloud.points[:, 2]
    tol = 1e-9 * Lz
    bad = np.nonzero((z < -tol) | (z > Lz + tol))[0]
    if len(bad):
        raise SpecError(f"cloud: point {bad[0]} has z={z[bad[0]]} outside [0, {Lz}]")
    zt = np.clip(z / Lz, 0.0, 1.0)
    return np.stack([_cos_series(profile.a, zt), _cos_series(profile.b, zt)], axis=1)


def _moment_weights(K: int, t: float, depth: float) -> np.ndarray:
    """w_k = integral_0^t cos(k pi z / depth) (z - t/2) dz in closed form."""
    w = np.zeros(K + 1)
    k = np.arange(1, K + 1)
    c = k * np.pi / depth
    w[1:] = t * np.sin(c * t) / (2 * c) + (np.cos(c * t) - 1.0) / c**2
    return w


def bending_moments(profile: StressProfile, t: float, depth: float | None = None) -> tuple[float, float]:
    """(M_x, M_y) in N*mm/mm over retained thickness ``t``.

    The series is in z / ``depth``; ``depth`` defaults to ``t``.
    """
    depth = t if depth is None else depth
    if not 0 < t <= depth * (1 + 1e-12):
        raise SpecError(f"t: need 0 < t <= depth={depth}, got {t}")
    w = _moment_weights(profile.order, t, depth)
    return float(w @ profile.a), float(w @ profile.b)


def curvatures(profile: StressProfile, t: float, depth: float, consts: MaterialConsts):
    Mx, My = bending_moments(profile, t, depth)
    nu = consts.nu
    D = consts.E_mpa * t**3 / (12.0 * (1.0 - nu**2))
    denom = D * (1.0 - nu**2)
    return (Mx - nu * My) / denom, (My - nu * Mx) / denom


def plate_deflection_oracle(
    profile: StressProfile, spec: ComponentSpec, consts: MaterialConsts, cloud: PointCloud
) -> np.ndarray:
    """(N, 3) displacements (u_x, u_y, u_z) in mm at the cloud points."""
    pts = cloud.points
    Lz = spec.dims[2]
    t = local_thickness(spec, pts[:, :2])
    if np.any(~(t > 0)):
        raise SpecError("thickness: local thickness must be positive everywhere")
    rel = pts - spec.center
    kx = np.empty(len(pts))
    ky = np.empty(len(pts))
    for tv in np.unique(t):
        sel = t == tv
        kx[sel], ky[sel] = curvatures(profile, float(tv), Lz, consts)
    uz = 0.5 * (kx * rel[:, 0] ** 2 + ky * rel[:, 1] ** 2)
    ux = -rel[:, 2] * kx * rel[:, 0]
    uy = -rel[:, 2] * ky * rel[:, 1]
    return np.stack([ux, uy, uz], axis=1)


def make_sample(spec: ComponentSpec, profile: StressProfile, config: DatasetConfig) -> Sample:
    cloud = sample_component(spec, config.n_points)
    stress = eval_stress_at_points(profile, cloud, spec)
    defo = plate_deflection_oracle(profile, spec, config.material, cloud)
    return Sample(spec=spec, cloud=cloud, stress=stress, deformation=defo, profile=profile)


def make_dataset(n: int, family: str, seed: int, config: DatasetConfig | None = None) -> list[Sample]:
    """``n`` samples; sample i uses seed ``seed + i`` for both geometry and stress."""
    if n < 1:
        raise SpecError(f"n: need at least one sample, got {n}")
    config = config or DatasetConfig()
    out = []
    for i in range(n):
        s = int(seed) + i
        spec = random_spec(family, s)
        profile = gen_stress_profile(s, config.order, config.bound)
        out.append(make_sample(spec, profile, config))
    return out


@dataclass
class Split:
    train: list
    test: list
    warning: str | None = None

    def __iter__(self):
        return iter((self.train, self.test))


def is_large(spec: ComponentSpec, union: bool = False) -> bool:
    Lx, Ly, _ = spec.dims
    return (Lx > 400.0 or Ly > 200.0) if union else (Lx > 400.0 and Ly > 200.0)


def generalization_split(samples, union: bool = False) -> Split:
    """Large parts (Lx > 400 and Ly > 200 mm) go to test, the rest to train."""
    import warnings

    train = [s for s in samples if not is_large(s.spec, union)]
    test = [s for s in samples if is_large(s.spec, union)]
    msg = None
    if not train or not test:
        msg = f"dimension split has an empty side (train={len(train)}, test={len(test)})"
        warnings.warn(msg, stacklevel=2)
    return Split(train, test, msg)
