"""Parametric part geometries as point clouds, kNN graphs and normalization.

Three families are supported:

* ``blank``  -- the plain box ``[0, Lx] x [0, Ly] x [0, Lz]``.
* ``frame``  -- the box with an ``nx x ny`` grid of rectangular pockets cut
  from the top face, leaving walls of ``w_wall`` between and around the
  pockets and a floor of ``w_floor`` under them.
* ``cbeam``  -- a channel extruded along x: a web of thickness ``t_web`` at
  the bottom and two flanges of thickness ``t_flange`` along the y edges.

All lengths are millimetres.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels

FAMILIES = ("frame", "cbeam", "blank")

# dimension ranges used when drawing random specs (mm)
FAMILY_RANGES = {
    "frame": {"Lx": (208.0, 612.0), "Ly": (128.0, 248.0), "Lz": (30.0, 60.0)},
    "cbeam": {"Lx": (208.0, 612.0), "Ly": (60.0, 120.0), "Lz": (30.0, 60.0)},
    "blank": {"Lx": (208.0, 612.0), "Ly": (128.0, 248.0), "Lz": (30.0, 60.0)},
}

DEFAULT_N_POINTS = 512
LATTICE_OVERSAMPLE = 4


class SpecError(ValueError):
    """Invalid geometry specification or geometry-operation argument."""


@dataclass(frozen=True)
class ComponentSpec:
    family: str
    dims: tuple[float, float, float]
    nx: int | None = None
    ny: int | None = None
    w_wall: float | None = None
    w_floor: float | None = None
    t_flange: float | None = None
    t_web: float | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(float(d) for d in self.dims))
        validate_spec(self)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * np.asarray(self.dims)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["dims"] = list(self.dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ComponentSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise SpecError(f"unknown ComponentSpec fields: {sorted(unknown)}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ComponentSpec":
        return cls.from_dict(json.loads(text))


def validate_spec(spec: ComponentSpec) -> None:
    if spec.family not in FAMILIES:
        raise SpecError(f"family: unknown family {spec.family!r}")
    if len(spec.dims) != 3:
        raise SpecError("dims: expected three values (Lx, Ly, Lz)")
    Lx, Ly, Lz = spec.dims
    for name, v in zip(("Lx", "Ly", "Lz"), spec.dims):
        if not np.isfinite(v) or v <= 0:
            raise SpecError(f"dims: {name} must be positive, got {v}")
    if not 0 <= int(spec.seed) < 2**64:
        raise SpecError("seed: must be a 64-bit unsigned integer")

    def need(name):
        v = getattr(spec, name)
        if v is None:
            raise SpecError(f"{name}: required for family {spec.family!r}")
        return v

    if spec.family == "frame":
        nx, ny = int(need("nx")), int(need("ny"))
        w, fl = float(need("w_wall")), float(need("w_floor"))
        if nx < 1:
            raise SpecError("nx: need at least one pocket column")
        if ny < 1:
            raise SpecError("ny: need at least one pocket row")
        if w <= 0:
            raise SpecError("w_wall: must be positive")
        if w * (nx + 1) >= Lx:
            raise SpecError(f"w_wall: {nx + 1} walls of {w} mm do not fit in Lx={Lx}")
        if w * (ny + 1) >= Ly:
            raise SpecError(f"w_wall: {ny + 1} walls of {w} mm do not fit in Ly={Ly}")
        if not 0 < fl < Lz:
            raise SpecError(f"w_floor: must lie in (0, Lz={Lz}), got {fl}")
    elif spec.family == "cbeam":
        tf, tw = float(need("t_flange")), float(need("t_web"))
        if not 0 < 2 * tf < Ly:
            raise SpecError(f"t_flange: two flanges of {tf} mm do not fit in Ly={Ly}")
        if not 0 < tw < Lz:
            raise SpecError(f"t_web: must lie in (0, Lz={Lz}), got {tw}")


def _pocket_intervals(L: float, count: int, wall: float) -> np.ndarray:
    width = (L - (count + 1) * wall) / count
    lo = wall + np.arange(count) * (width + wall)
    return np.stack([lo, lo + width], axis=1)


def _in_any(v: np.ndarray, intervals: np.ndarray) -> np.ndarray:
    # open intervals: pocket boundaries belong to the material
    return ((v[:, None] > intervals[None, :, 0]) & (v[:, None] < intervals[None, :, 1])).any(1)


def over_void(spec: ComponentSpec, xy: np.ndarray) -> np.ndarray:
    """Mask of (x, y) locations lying over a pocket (frame) or the channel (cbeam)."""
    xy = np.atleast_2d(np.asarray(xy, dtype=np.float64))
    Lx, Ly, _ = spec.dims
    if spec.family == "frame":
        return _in_any(xy[:, 0], _pocket_intervals(Lx, spec.nx, spec.w_wall)) & _in_any(
            xy[:, 1], _pocket_intervals(Ly, spec.ny, spec.w_wall)
        )
    if spec.family == "cbeam":
        return (xy[:, 1] > spec.t_flange) & (xy[:, 1] < Ly - spec.t_flange)
    return np.zeros(len(xy), dtype=bool)


def local_thickness(spec: ComponentSpec, xy: np.ndarray) -> np.ndarray:
    """Material thickness under each (x, y): full Lz, or the floor/web under voids."""
    Lz = spec.dims[2]
    thin = spec.w_floor if spec.family == "frame" else spec.t_web
    return np.where(over_void(spec, xy), thin if thin is not None else Lz, Lz)


def inside_material(spec: ComponentSpec, points: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Implicit-solid inside test (boundary counts as inside)."""
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    box = np.all((p >= -tol) & (p <= np.asarray(spec.dims) + tol), axis=1)
    return box & (p[:, 2] <= local_thickness(spec, p[:, :2]) + tol)


def material_volume(spec: ComponentSpec) -> float:
    Lx, Ly, Lz = spec.dims
    full = Lx * Ly * Lz
    if spec.family == "frame":
        px = (Lx - (spec.nx + 1) * spec.w_wall) / spec.nx
        py = (Ly - (spec.ny + 1) * spec.w_wall) / spec.ny
        return full - spec.nx * spec.ny * px * py * (Lz - spec.w_floor)
    if spec.family == "cbeam":
        return full - Lx * (Ly - 2 * spec.t_flange) * (Lz - spec.t_web)
    return full


@dataclass
class PointCloud:
    points: np.ndarray
    channels: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise SpecError(f"points: expected shape (N, 3), got {self.points.shape}")
        if len(self.points) < 4:
            raise SpecError("points: a cloud needs at least 4 points")
        for name, arr in self.channels.items():
            arr = np.asarray(arr, dtype=np.float64)
            if len(arr) != len(self.points):
                raise SpecError(
                    f"channel {name!r}: length {len(arr)} != point count {len(self.points)}"
                )
            self.channels[name] = arr

    def __len__(self) -> int:
        return len(self.points)

    def has_duplicates(self) -> bool:
        return len(np.unique(self.points, axis=0)) != len(self.points)

    def subset(self, idx) -> "PointCloud":
        idx = np.asarray(idx)
        return PointCloud(self.points[idx], {k: v[idx] for k, v in self.channels.items()})


@dataclass(frozen=True)
class KnnGraph:
    k: int
    neighbors: np.ndarray  # (N, k), ascending distance


LATTICE_JITTER = 0.2  # per-point jitter, fraction of the lattice spacing


def _lattice(spec: ComponentSpec, h: float, offset: np.ndarray, rng) -> np.ndarray:
    axes = []
    for L, o in zip(spec.dims, offset):
        n = int(np.floor((L - o) / h)) + 1
        axes.append(o + h * np.arange(n))
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    # jitter breaks the exact distance ties of a regular lattice, which would
    # otherwise make kNN neighbourhoods (and anything built on them) jump
    # under arbitrarily small moves; reflect back into the box
    dims = np.asarray(spec.dims)
    grid = grid + rng.uniform(-LATTICE_JITTER, LATTICE_JITTER, grid.shape) * h
    grid = np.abs(grid)
    grid = np.where(grid > dims, 2 * dims - grid, grid)
    return grid[inside_material(spec, grid)]


def sample_component(spec: ComponentSpec, n_points: int = DEFAULT_N_POINTS) -> PointCloud:
    """``n_points`` material points: jittered lattice, rejection, then FPS.

    Deterministic in ``(spec.seed, n_points)``.
    """
    if n_points < 64:
        raise SpecError(f"n_points: need at least 64, got {n_points}")
    validate_spec(spec)
    rng = np.random.default_rng(int(spec.seed))
    offset_frac = rng.random(3)
    h = (material_volume(spec) / (LATTICE_OVERSAMPLE * n_points)) ** (1.0 / 3.0)
    for _ in range(60):
        # offsets stay below every axis length so each axis gets a lattice line
        offset = offset_frac * np.minimum(h, 0.5 * np.min(spec.dims))
        pts = _lattice(spec, h, offset, rng)
        if len(pts) >= LATTICE_OVERSAMPLE * n_points:
            break
        h *= 0.85
    else:
        raise SpecError("dims: could not place enough lattice points in the material")
    order = farthest_point_indices(pts, n_points)
    return PointCloud(pts[order])


def reference_blank(spec: ComponentSpec, n_points: int = DEFAULT_N_POINTS) -> PointCloud:
    """Point cloud of the featureless box with the same outer dims and seed."""
    validate_spec(spec)
    blank = ComponentSpec(family="blank", dims=spec.dims, seed=spec.seed)
    return sample_component(blank, n_points)


def normalize_coords(
    cloud: PointCloud, median_dims, center=None
) -> PointCloud:
    """Center (bounding-box center unless ``center`` is given) and divide by medians."""
    med = np.asarray(median_dims, dtype=np.float64)
    if med.shape != (3,) or np.any(~(med > 0)):
        raise SpecError(f"median_dims: must be three positive values, got {median_dims}")
    if center is None:
        center = 0.5 * (cloud.points.min(0) + cloud.points.max(0))
    pts = (cloud.points - np.asarray(center, dtype=np.float64)) / med
    return PointCloud(pts, {k: v.copy() for k, v in cloud.channels.items()})


def denormalize_coords(cloud: PointCloud, median_dims, center) -> PointCloud:
    med = np.asarray(median_dims, dtype=np.float64)
    if med.shape != (3,) or np.any(~(med > 0)):
        raise SpecError(f"median_dims: must be three positive values, got {median_dims}")
    pts = cloud.points * med + np.asarray(center, dtype=np.float64)
    return PointCloud(pts, {k: v.copy() for k, v in cloud.channels.items()})


def median_dims(dataset) -> tuple[float, float, float]:
    """Per-axis lower median of outer dims over a single-family list of specs."""
    specs = list(dataset)
    if not specs:
        raise SpecError("dataset: need at least one spec")
    fams = {s.family for s in specs}
    if len(fams) > 1:
        raise SpecError(f"family: mixed families {sorted(fams)}")
    dims = np.sort(np.array([s.dims for s in specs]), axis=0)
    mid = (len(specs) - 1) // 2
    return tuple(float(v) for v in dims[mid])


def knn_graph(cloud, k: int) -> KnnGraph:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    n = len(pts)
    if not 0 < k < n:
        raise SpecError(f"k: need 0 < k < N={n}, got {k}")
    nbrs = kernels.knn_query(pts, pts, k, np.arange(n))
    return KnnGraph(k=k, neighbors=nbrs)


def farthest_point_indices(points, n: int) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if not 0 < n <= len(pts):
        raise SpecError(f"n: need 0 < n <= N={len(pts)}, got {n}")
    d = ((pts - pts.mean(0)) ** 2).sum(1)
    start = int(np.argmin(d))
    return kernels.farthest_point_order(pts, n, start)


def farthest_point_sample(cloud: PointCloud, n: int) -> PointCloud:
    """Greedy max-min subset, starting from the point nearest the centroid."""
    return cloud.subset(farthest_point_indices(cloud.points, n))


def random_spec(family: str, seed: int, ranges: dict | None = None) -> ComponentSpec:
    """Draw a valid spec with dims uniform in the family ranges."""
    if family not in FAMILIES:
        raise SpecError(f"family: unknown family {family!r}")
    r = (ranges or FAMILY_RANGES)[family]
    rng = np.random.default_rng([int(seed), 0x5EED])
    dims = tuple(float(rng.uniform(*r[a])) for a in ("Lx", "Ly", "Lz"))
    Lz = dims[2]
    if family == "frame":
        return ComponentSpec(
            family="frame",
            dims=dims,
            nx=int(rng.integers(1, 4)),
            ny=int(rng.integers(1, 3)),
            w_wall=float(rng.uniform(8.0, 16.0)),
            w_floor=float(rng.uniform(0.25, 0.45) * Lz),
            seed=int(seed),
        )
    if family == "cbeam":
        return ComponentSpec(
            family="cbeam",
            dims=dims,
            t_flange=float(rng.uniform(8.0, 16.0)),
            t_web=float(rng.uniform(0.25, 0.45) * Lz),
            seed=int(seed),
        )
    return ComponentSpec(family="blank", dims=dims, seed=int(seed))
