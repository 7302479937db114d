import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ndno.geometry import (
    ComponentSpec,
    PointCloud,
    SpecError,
    denormalize_coords,
    farthest_point_indices,
    farthest_point_sample,
    inside_material,
    knn_graph,
    median_dims,
    normalize_coords,
    over_void,
    random_spec,
    reference_blank,
    sample_component,
)


def frame(**kw):
    base = dict(family="frame", dims=(400.0, 200.0, 40.0), nx=2, ny=1, w_wall=10.0, w_floor=12.0, seed=3)
    base.update(kw)
    return ComponentSpec(**base)


def test_blank_points_inside_box():
    spec = ComponentSpec("blank", (100.0, 50.0, 20.0), seed=1)
    c = sample_component(spec, 64)
    assert len(c) == 64
    assert np.all(c.points >= 0) and np.all(c.points <= [100, 50, 20])


def test_single_pocket_spanning_interior_is_empty():
    spec = frame(nx=1, ny=1)
    c = sample_component(spec, 256)
    xy_void = over_void(spec, c.points[:, :2])
    assert np.all(c.points[xy_void, 2] <= spec.w_floor + 1e-9)


def test_sampling_is_deterministic():
    a = sample_component(frame(), 128)
    b = sample_component(frame(), 128)
    assert np.array_equal(a.points, b.points)


@given(st.sampled_from(["frame", "cbeam", "blank"]), st.integers(0, 10_000))
def test_sampled_points_pass_inside_test(family, seed):
    spec = random_spec(family, seed)
    c = sample_component(spec, 64)
    assert inside_material(spec, c.points).all()
    assert not c.has_duplicates()


def test_infeasible_spec_names_field():
    with pytest.raises(SpecError, match="w_floor"):
        frame(w_floor=45.0)
    with pytest.raises(SpecError, match="w_wall"):
        frame(w_wall=150.0)
    with pytest.raises(SpecError, match="t_flange"):
        ComponentSpec("cbeam", (300.0, 80.0, 40.0), t_flange=45.0, t_web=10.0)


def test_n_points_minimum():
    with pytest.raises(SpecError):
        sample_component(frame(), 32)


def test_reference_blank_ignores_features():
    a = reference_blank(frame(nx=1), 128)
    b = reference_blank(frame(nx=3, w_floor=20.0), 128)
    assert np.array_equal(a.points, b.points)
    assert a.points.max(0)[0] <= 400.0


def test_reference_blank_of_blank_is_itself():
    spec = ComponentSpec("blank", (300.0, 150.0, 30.0), seed=9)
    assert np.array_equal(reference_blank(spec, 96).points, sample_component(spec, 96).points)


def test_normalize_box_to_unit_cube():
    corners = np.array([[x, y, z] for x in (0, 400) for y in (0, 200) for z in (0, 40)], dtype=float)
    out = normalize_coords(PointCloud(corners), (400, 200, 40)).points
    assert out.min() == -0.5 and out.max() == 0.5


def test_normalize_identity_and_idempotent(rng):
    pts = rng.normal(size=(20, 3))
    pts -= 0.5 * (pts.min(0) + pts.max(0))
    c = PointCloud(pts, {"v": np.arange(20.0)})
    once = normalize_coords(c, (1, 1, 1))
    assert np.array_equal(once.points, pts)
    assert np.array_equal(normalize_coords(once, (1, 1, 1)).points, once.points)
    assert np.array_equal(once.channels["v"], np.arange(20.0))


def test_normalize_rejects_bad_median(rng):
    with pytest.raises(SpecError):
        normalize_coords(PointCloud(rng.normal(size=(5, 3))), (1, 0, 1))


@given(st.integers(0, 2**31), st.floats(1.0, 1000.0), st.floats(1.0, 1000.0), st.floats(1.0, 1000.0))
def test_normalize_roundtrip(seed, mx, my, mz):
    pts = np.random.default_rng(seed).uniform(0, 500, size=(16, 3))
    c = PointCloud(pts)
    center = 0.5 * (pts.min(0) + pts.max(0))
    back = denormalize_coords(normalize_coords(c, (mx, my, mz)), (mx, my, mz), center)
    assert np.allclose(back.points, pts, rtol=1e-12, atol=1e-12 * np.abs(pts).max())


def test_median_dims_rules():
    specs = [ComponentSpec("blank", (L, 100.0, 30.0)) for L in (200.0, 300.0, 400.0)]
    assert median_dims(specs)[0] == 300.0
    assert median_dims(specs[:1]) == (200.0, 100.0, 30.0)
    assert median_dims([specs[0], specs[2]])[0] == 200.0
    with pytest.raises(SpecError):
        median_dims([specs[0], frame()])
    with pytest.raises(SpecError):
        median_dims([])


def test_knn_graph_square():
    sq = PointCloud(np.array([[0.0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]]))
    g = knn_graph(sq, 2)
    for i, row in enumerate(g.neighbors):
        assert sorted(row) == sorted([(i + 1) % 4, (i - 1) % 4])
    with pytest.raises(SpecError):
        knn_graph(sq, 4)


def test_knn_graph_collinear_tie():
    c = PointCloud(np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [10, 0, 0]]))
    assert knn_graph(c, 1).neighbors[1, 0] == 0


def test_knn_graph_matches_bruteforce(rng):
    pts = rng.normal(size=(300, 3))
    nb = knn_graph(PointCloud(pts), 10).neighbors
    d = ((pts[:, None] - pts[None]) ** 2).sum(-1)
    np.fill_diagonal(d, np.inf)
    ref = np.array([np.lexsort((np.arange(300), row))[:10] for row in d])
    assert np.array_equal(nb, ref)


def test_fps_permutation_and_trace():
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [5, 5, 5]])[:3]
    seg = PointCloud(np.vstack([pts, [[3.0, 0, 0]]]))
    assert sorted(farthest_point_indices(seg.points, 4)) == [0, 1, 2, 3]
    # endpoints + midpoint: the centroid is the midpoint, then one endpoint
    tri = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]])
    assert list(farthest_point_indices(tri, 2)) == [1, 0]
    with pytest.raises(SpecError):
        farthest_point_sample(seg, 5)


def test_fps_spread_beats_random_subsets(rng):
    pts = rng.uniform(size=(400, 3))
    sel = pts[farthest_point_indices(pts, 32)]

    def min_dist(p):
        d = np.sqrt(((p[:, None] - p[None]) ** 2).sum(-1))
        np.fill_diagonal(d, np.inf)
        return d.min()

    ours = min_dist(sel)
    for _ in range(20):
        assert ours >= min_dist(pts[rng.choice(400, 32, replace=False)])


def test_spec_json_roundtrip():
    s = frame()
    d = json.loads(s.to_json())
    assert set(d) == {"family", "dims", "nx", "ny", "w_wall", "w_floor", "t_flange", "t_web", "seed"}
    assert ComponentSpec.from_json(s.to_json()) == s


@given(st.integers(0, 10**6))
def test_frame_dims_in_range(seed):
    s = random_spec("frame", seed)
    assert 208 <= s.dims[0] <= 612 and 128 <= s.dims[1] <= 248


def test_pointcloud_validation():
    with pytest.raises(SpecError):
        PointCloud(np.zeros((3, 3)))
    with pytest.raises(SpecError):
        PointCloud(np.eye(4, 3), {"a": np.zeros(3)})
