import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ndno.geometry import ComponentSpec, PointCloud, SpecError, local_thickness, sample_component
from ndno.oracle import (
    DatasetConfig,
    MaterialConsts,
    StressProfile,
    bending_moments,
    curvatures,
    eval_stress_at_points,
    gen_stress_profile,
    generalization_split,
    make_dataset,
    make_sample,
    plate_deflection_oracle,
)

MAT = MaterialConsts()


def quad_moment(coef, t, depth, panels=10_000):
    """Composite Simpson rule on the raw integrand."""
    z = np.linspace(0.0, t, 2 * panels + 1)
    k = np.arange(len(coef))
    f = (np.cos(np.pi * np.outer(z / depth, k)) @ coef) * (z - t / 2)
    h = t / (2 * panels)
    return h / 3 * (f[0] + f[-1] + 4 * f[1:-1:2].sum() + 2 * f[2:-1:2].sum())


def box(dims=(400.0, 200.0, 40.0)):
    return ComponentSpec("blank", dims, seed=2)


def test_profile_examples():
    assert not gen_stress_profile(5, 3, 0.0).a.any()
    p1, p2 = gen_stress_profile(11), gen_stress_profile(11)
    assert np.array_equal(p1.a, p2.a) and np.array_equal(p1.b, p2.b)
    for s in range(1000):
        p = gen_stress_profile(s, 3, 100.0)
        assert np.abs(p.a).max() <= 100 and np.abs(p.b).max() <= 100
    with pytest.raises(SpecError):
        gen_stress_profile(1, 0)


def test_stress_evaluation_examples():
    spec = box()
    pts = np.array([[1.0, 1, 0], [2, 2, 40], [3, 3, 20], [4, 4, 10]])
    c = PointCloud(pts)
    s = eval_stress_at_points(StressProfile([50, 0, 0, 0], [0, 0, 0, 0]), c, spec)
    assert np.all(s[:, 0] == 50) and np.all(s[:, 1] == 0)
    s = eval_stress_at_points(StressProfile([0, 10], [0, 0]), c, spec)
    assert s[0, 0] == 10 and s[1, 0] == pytest.approx(-10, abs=1e-12)
    zero = eval_stress_at_points(StressProfile([0, 0], [0, 0]), c, spec)
    assert not zero.any()
    with pytest.raises(SpecError):
        eval_stress_at_points(StressProfile([0, 1], [0, 1]), PointCloud(pts + [0, 0, 41]), spec)


def test_constant_stress_has_no_moment():
    assert bending_moments(StressProfile([30, 0], [-12, 0]), 10.0) == (0.0, 0.0)
    assert bending_moments(StressProfile([0, 0], [0, 0]), 7.0) == (0.0, 0.0)


def test_cosine_moment_matches_quadrature():
    p = StressProfile([0, 10], [0, 0])
    mx, _ = bending_moments(p, 10.0)
    ref = quad_moment(np.array([0.0, 10.0]), 10.0, 10.0)
    assert mx == pytest.approx(ref, rel=1e-8)
    # hand value: 10 * (-2 t^2 / pi^2) for k = 1 over the full depth
    assert mx == pytest.approx(-200.0 / np.pi**2 * 10, rel=1e-12)


def test_moments_match_quadrature_on_random_profiles():
    rng = np.random.default_rng(0)
    for i in range(100):
        p = gen_stress_profile(1000 + i, 3, 100.0)
        depth = rng.uniform(20, 60)
        t = depth * rng.uniform(0.2, 1.0)
        mx, my = bending_moments(p, t, depth)
        for got, coef in ((mx, p.a), (my, p.b)):
            ref = quad_moment(coef, t, depth)
            assert abs(got - ref) <= 1e-8 * max(abs(ref), 1e-300)


def test_moment_rejects_bad_thickness():
    p = StressProfile([0, 1], [0, 1])
    with pytest.raises(SpecError):
        bending_moments(p, 0.0)
    with pytest.raises(SpecError):
        bending_moments(p, 20.0, depth=10.0)


def test_equal_biaxial_paraboloid():
    # a == b gives M_x == M_y, so kappa = M / (D (1 + nu))
    spec = box()
    p = StressProfile([0, 20, 0, 5], [0, 20, 0, 5])
    pts = np.array([[200.0, 100, 20], [300, 100, 20], [200, 150, 20], [250, 150, 0]])
    u = plate_deflection_oracle(p, spec, MAT, PointCloud(pts))
    M, _ = bending_moments(p, 40.0)
    D = MAT.E_mpa * 40.0**3 / (12 * (1 - MAT.nu**2))
    k = M / (D * (1 + MAT.nu))
    r2 = (pts[:, 0] - 200) ** 2 + (pts[:, 1] - 100) ** 2
    assert np.allclose(u[:, 2], 0.5 * k * r2, rtol=1e-12, atol=0)
    assert u[1, 2] == pytest.approx(u[2, 2] * 4, rel=1e-12)  # 100^2 vs 50^2


def test_curvature_formula():
    p = gen_stress_profile(3)
    kx, ky = curvatures(p, 12.0, 40.0, MAT)
    mx, my = bending_moments(p, 12.0, 40.0)
    D = MAT.E_mpa * 12.0**3 / (12 * (1 - MAT.nu**2))
    assert kx == pytest.approx((mx - MAT.nu * my) / (D * (1 - MAT.nu**2)), rel=1e-14)
    assert ky == pytest.approx((my - MAT.nu * mx) / (D * (1 - MAT.nu**2)), rel=1e-14)


def test_zero_stress_zero_deformation():
    s = make_sample(box(), StressProfile([0, 0, 0], [0, 0, 0]), DatasetConfig(n_points=64))
    assert not s.deformation.any()


@given(st.integers(0, 10_000), st.floats(-5.0, 5.0))
def test_oracle_linearity(seed, alpha):
    spec = ComponentSpec("frame", (300.0, 180.0, 40.0), nx=2, ny=1, w_wall=10.0, w_floor=15.0, seed=1)
    cloud = sample_component(spec, 64)
    p = gen_stress_profile(seed)
    u1 = plate_deflection_oracle(p.scaled(alpha), spec, MAT, cloud)
    u0 = plate_deflection_oracle(p, spec, MAT, cloud)
    assert np.allclose(u1, alpha * u0, rtol=1e-12, atol=1e-12 * np.abs(alpha * u0).max() + 1e-300)


def test_doubling_stress_doubles_deformation():
    spec = box()
    c = sample_component(spec, 64)
    p = gen_stress_profile(4)
    assert np.allclose(plate_deflection_oracle(p.scaled(2.0), spec, MAT, c), 2 * plate_deflection_oracle(p, spec, MAT, c), rtol=1e-13)


def test_mirroring_flips_curvature():
    p = gen_stress_profile(9)
    # over the full depth mirroring flips the moment exactly
    m1 = bending_moments(p, 40.0)
    m2 = bending_moments(p.mirrored(), 40.0)
    assert np.allclose(m2, [-m1[0], -m1[1]], rtol=1e-12)
    spec = box()
    c = sample_component(spec, 64)
    u1 = plate_deflection_oracle(p, spec, MAT, c)[:, 2]
    u2 = plate_deflection_oracle(p.mirrored(), spec, MAT, c)[:, 2]
    assert np.allclose(u2, -u1, rtol=1e-12)


def test_local_thickness_under_pockets():
    spec = ComponentSpec("frame", (300.0, 180.0, 40.0), nx=1, ny=1, w_wall=10.0, w_floor=15.0)
    t = local_thickness(spec, np.array([[150.0, 90.0], [5.0, 90.0]]))
    assert list(t) == [15.0, 40.0]


def test_material_validation():
    with pytest.raises(SpecError):
        MaterialConsts(E=0)
    with pytest.raises(SpecError):
        MaterialConsts(nu=0.5)


def test_make_dataset_contract():
    a = make_dataset(1, "frame", 77, DatasetConfig(n_points=64))[0]
    b = make_dataset(1, "frame", 77, DatasetConfig(n_points=64))[0]
    assert np.array_equal(a.deformation, b.deformation) and a.spec == b.spec
    many = make_dataset(50, "frame", 0, DatasetConfig(n_points=64))
    profiles = {tuple(s.profile.a) + tuple(s.profile.b) for s in many}
    assert len(profiles) == 50
    assert all(208 <= s.spec.dims[0] <= 612 for s in many)
    with pytest.raises(SpecError):
        make_dataset(0, "frame", 0)


def _spec(Lx, Ly):
    return ComponentSpec("blank", (Lx, Ly, 40.0))


class _S:
    def __init__(self, spec):
        self.spec = spec


def test_generalization_split_rule():
    s = [_S(_spec(612, 248)), _S(_spec(208, 128)), _S(_spec(612, 128))]
    sp = generalization_split(s)
    assert sp.test == [s[0]] and sp.train == [s[1], s[2]]
    assert generalization_split(s, union=True).test == [s[0], s[2]]
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        sp = generalization_split(s[1:2])
    assert sp.warning and w
