import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from ndno.diffeo import (
    DiffeoConfig,
    MappingResult,
    apply_mapping,
    build_field,
    cross_attention_match,
    det3,
    encode,
    edgeconv_features,
    init_diffeo_params,
    jacobian_at_points,
    loss_inv,
    loss_smooth,
    loss_total,
    mapping_loss,
    pullback_solution,
    pushforward_field,
)
from ndno.geometry import SpecError, knn_graph
from ndno.transport import NumericError

SMALL = DiffeoConfig(width=8, n_edgeconv=2, heads=2, ffn_hidden=8, proj_hidden=8, k=4, n_context=32)


def bent(config=SMALL, seed=0, scale=0.05):
    """Parameters with a non-zero displacement head."""
    p = init_diffeo_params(config, seed)
    g = torch.Generator().manual_seed(seed + 100)
    p.tensors["proj.w2"] = scale * torch.randn(config.proj_hidden, 3, generator=g, dtype=torch.float64)
    p.tensors["proj.b2"] = scale * torch.randn(3, generator=g, dtype=torch.float64)
    return p


def test_identity_at_init(rng):
    p = init_diffeo_params(SMALL, 3)
    src, tgt = rng.uniform(size=(40, 3)), rng.uniform(size=(30, 3))
    res = apply_mapping(p, src, tgt, with_jacobian=True)
    assert np.array_equal(res.mapped_points, src)
    assert np.array_equal(res.jacobians, np.broadcast_to(np.eye(3), (40, 3, 3)))
    assert np.all(det3(torch.tensor(res.jacobians)).numpy() == 1.0)
    assert float(loss_inv(res.jacobians)) == 0.0 and float(loss_smooth(res.jacobians)) == 0.0


def test_jacobian_matches_central_differences(rng):
    p = bent(seed=1)
    src, tgt = rng.uniform(size=(60, 3)), rng.uniform(size=(50, 3))
    fld = build_field(p, src, tgt)
    idx = fld.self_index_for(60)
    J = jacobian_at_points(p, src, tgt)
    h = 1e-5
    for i in range(0, 60, 7):
        fd = np.empty((3, 3))
        for b in range(3):
            e = np.zeros(3)
            e[b] = h
            with torch.no_grad():
                up = src[i] + e + fld(torch.tensor((src[i] + e)[None]), idx[i : i + 1])[0].numpy()
                dn = src[i] - e + fld(torch.tensor((src[i] - e)[None]), idx[i : i + 1])[0].numpy()
            fd[:, b] = (up - dn) / (2 * h)
        assert np.linalg.norm(J[i] - fd) / np.linalg.norm(fd) < 1e-5


def test_mapping_displacement_invariant(rng):
    p = bent(seed=2)
    src = rng.uniform(size=(50, 3))
    res = apply_mapping(p, src, rng.uniform(size=(45, 3)))
    assert np.array_equal(res.mapped_points, res.source_points + res.displacement)
    assert np.abs(res.displacement).max() > 0


def test_context_points_reproduce_plain_forward(rng):
    """Querying the field at context points equals the dynamic-graph pass."""
    p = bent(seed=4)
    src = rng.uniform(size=(30, 3))
    fld = build_field(p, src, rng.uniform(size=(30, 3)))
    q = torch.tensor(src)
    with torch.no_grad():
        a = fld(q)  # reuses context graphs
        b = fld(q, fld.self_index_for(30))
    assert torch.allclose(a, b, atol=1e-12)


def test_edgeconv_features_match_encoder(rng):
    p = init_diffeo_params(SMALL, 0)
    pts = rng.uniform(size=(25, 3))
    ctx = encode(p, pts)
    g = knn_graph(pts, SMALL.k)
    assert torch.allclose(edgeconv_features(pts, g, p), ctx.output, atol=1e-14)


def test_attention_rows_sum_to_one(rng):
    p = init_diffeo_params(SMALL, 0)
    fs, ft = torch.tensor(rng.normal(size=(7, 8))), torch.tensor(rng.normal(size=(9, 8)))
    m, w = cross_attention_match(fs, ft, p, return_weights=True)
    assert m.shape == (7, 8) and w.shape == (2, 7, 9)
    assert torch.allclose(w.sum(-1), torch.ones(2, 7, dtype=torch.float64))
    with pytest.raises(SpecError):
        cross_attention_match(fs[:, :4], ft, p)


def test_loss_terms_known_values():
    J = np.stack([np.eye(3), np.diag([-1.0, 1, 1]), 2 * np.eye(3)])
    # dets: 1, -1, 8 -> relu(-det) mean 1/3
    assert float(loss_inv(J)) == pytest.approx(1 / 3)
    # ||J-I||^2: 0, 4, 3
    assert float(loss_smooth(J)) == pytest.approx(7.0)
    rep = loss_total(J, 0.5, 2.0, 3.0, 4.0)
    assert rep.as_floats()["total"] == pytest.approx(2 / 3 + 21 + 2)
    with pytest.raises(SpecError):
        loss_total(J, 0.0, -1.0, 1.0, 1.0)
    with pytest.raises(SpecError):
        loss_inv(np.zeros((0, 3, 3)))


def test_det3_matches_numpy(rng):
    J = rng.normal(size=(20, 3, 3))
    assert np.allclose(det3(torch.tensor(J)).numpy(), np.linalg.det(J), atol=1e-12)


def test_loss_gradient_matches_finite_differences(rng):
    p = bent(seed=5, scale=0.1)
    src, tgt = rng.uniform(size=(32, 3)), rng.uniform(size=(32, 3)) + 0.2
    betas = (1.0, 1e-2, 10.0)
    kw = dict(max_iters=20000, tol=1e-13)
    for v in p.tensors.values():
        v.requires_grad_(True)
    rep = mapping_loss(p, src, tgt, betas, eps_scale=0.05, sinkhorn_kw=kw)
    names = list(p.tensors)
    grads = dict(zip(names, torch.autograd.grad(rep.total, [p.tensors[n] for n in names])))
    h = 1e-6
    pick = np.random.default_rng(1)
    for name in ("ec0.w", "attn.wq", "ffn.w1", "proj.w1", "proj.w2", "proj.b2"):
        flat = p.tensors[name].detach().view(-1)
        for j in pick.choice(flat.numel(), size=3, replace=False):
            vals = []
            for s in (h, -h):
                old = float(flat[j])
                with torch.no_grad():
                    flat[j] = old + s
                vals.append(float(mapping_loss(p, src, tgt, betas, 0.05, kw).total.detach()))
                with torch.no_grad():
                    flat[j] = old
            fd = (vals[0] - vals[1]) / (2 * h)
            g = float(grads[name].reshape(-1)[j])
            assert abs(g - fd) <= 1e-4 * max(abs(fd), 1e-2), name


def test_non_finite_jacobian_is_reported(rng):
    p = bent(seed=6)
    p.tensors["proj.w2"][0, 0] = float("nan")
    with pytest.raises(NumericError):
        jacobian_at_points(p, rng.uniform(size=(20, 3)), rng.uniform(size=(20, 3)))


def test_encode_rejects_bad_k(rng):
    with pytest.raises(SpecError):
        encode(init_diffeo_params(SMALL), rng.uniform(size=(4, 3)))


def test_push_and_pull_keep_order(rng):
    src = rng.uniform(size=(5, 3))
    m = MappingResult(src, src + 1.0)
    vals = np.arange(10.0).reshape(5, 2)
    fwd = pushforward_field(vals, m)
    assert np.array_equal(fwd.points, src + 1.0) and np.array_equal(fwd.channels["c1"], vals[:, 1])
    back = pullback_solution(fwd, m)
    assert np.array_equal(back.points, src) and np.array_equal(back.channels["c0"], vals[:, 0])
    with pytest.raises(SpecError):
        pushforward_field(np.zeros(4), m)


def test_width_head_check():
    with pytest.raises(ValueError):
        DiffeoConfig(width=10, heads=4)


@given(st.lists(st.floats(-3, 3), min_size=9, max_size=9), st.floats(-2, 2))
def test_loss_inv_zero_iff_nonnegative_dets(entries, s):
    J = np.array(entries).reshape(1, 3, 3)
    J = np.concatenate([J, np.diag([s, 1.0, 1.0])[None]])
    dets = np.linalg.det(J)
    li = float(loss_inv(J))
    assert li >= 0
    if np.all(dets > 1e-9):
        assert li == 0.0
    if np.any(dets < -1e-9):
        assert li > 0.0
