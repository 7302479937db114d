import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from ndno.geometry import SpecError
from ndno.oracle import DatasetConfig, make_dataset
from ndno.training import (
    AdamState,
    LossHistory,
    TrainConfig,
    TrainingDiverged,
    _run_epochs,
    adam_step,
    cosine_lr,
    diffeo_quality,
    epoch_order,
    evaluate,
    label_slice,
    metrics_from_predictions,
    output_channels,
    predict,
    split_samples,
    train_diffeo,
    train_operator,
)

TINY = dict(
    epochs=2,
    n_points=64,
    operator_width=4,
    operator_layers=1,
    operator_modes=(1, 1, 1),
    diffeo_width=8,
    diffeo_k=4,
    diffeo_context=16,
    sinkhorn_iters=200,
)


@pytest.fixture(scope="module")
def tiny_data():
    return make_dataset(6, "frame", 3, DatasetConfig(n_points=64))


def test_default_hyperparameters():
    c = TrainConfig()
    assert (c.batch_size, c.learning_rate, c.epochs) == (4, 1e-2, 500)
    assert (c.beta1, c.beta2, c.beta3) == (1e4, 1e-3, 1e5)
    assert (c.adam_beta_m, c.adam_beta_v, c.adam_eps, c.lr_min) == (0.9, 0.999, 1e-8, 0.0)


def test_config_json_round_trip(tmp_path):
    c = TrainConfig(seed=3, operator_modes=(2, 2, 1), operator_epochs=7)
    p = tmp_path / "c.json"
    p.write_text(json.dumps(c.to_dict()))
    assert TrainConfig.from_json(p) == c
    with pytest.raises(SpecError):
        TrainConfig.from_dict({"learning_rat": 1.0})
    with pytest.raises(SpecError):
        TrainConfig(batch_size=0)
    with pytest.raises(SpecError):
        TrainConfig(adam_beta_m=1.0)


def test_stage_overrides():
    c = TrainConfig(epochs=10, diffeo_epochs=3, operator_learning_rate=1e-3)
    assert (c.stage("diffeo").epochs, c.stage("diffeo").learning_rate) == (3, 1e-2)
    assert (c.stage("operator").epochs, c.stage("operator").learning_rate) == (10, 1e-3)


def test_cosine_lr_closed_form():
    c = TrainConfig(learning_rate=1e-2, epochs=500, lr_min=1e-4)
    assert cosine_lr(0, c) == 1e-2
    assert abs(cosine_lr(500, c) - 1e-4) <= 1e-15
    assert abs(cosine_lr(250, c) - (1e-4 + 0.5 * (1e-2 - 1e-4))) <= 1e-15
    with pytest.raises(SpecError):
        cosine_lr(501, c)


@given(st.integers(1, 1000), st.floats(0, 1))
def test_cosine_lr_is_monotone(E, frac):
    c = TrainConfig(epochs=E)
    t = frac * E
    assert 0.0 <= cosine_lr(t, c) <= c.learning_rate
    assert cosine_lr(min(t + 0.5, E), c) <= cosine_lr(t, c) + 1e-18


def test_adam_matches_torch_optimizer(rng):
    c = TrainConfig()
    w = torch.tensor(rng.normal(size=(3, 2)))
    ref = w.clone().requires_grad_(True)
    opt = torch.optim.Adam([ref], lr=1e-2, betas=(0.9, 0.999), eps=1e-8)
    params, state = {"w": w}, AdamState()
    for step in range(20):
        g = torch.tensor(rng.normal(size=(3, 2)))
        params, state = adam_step(params, {"w": g}, state, 1e-2, c)
        ref.grad = g.clone()
        opt.step()
    assert torch.allclose(params["w"], ref.detach(), atol=1e-14)


def test_adam_converges_on_quadratic():
    c = TrainConfig()
    p, s = {"x": torch.tensor([5.0], dtype=torch.float64)}, AdamState()
    for _ in range(5000):
        p, s = adam_step(p, {"x": 2 * (p["x"] - 1.5)}, s, 1e-2, c)
        if abs(float(p["x"]) - 1.5) < 1e-6:
            break
    assert abs(float(p["x"]) - 1.5) < 1e-6


def test_adam_rejects_nan_gradient():
    with pytest.raises(Exception, match="blk"):
        adam_step({"blk": torch.zeros(2)}, {"blk": torch.tensor([0.0, math.nan])}, AdamState(), 0.1, TrainConfig())


def test_divergence_keeps_last_checkpoint():
    calls = {"n": 0}

    def loss_fn(p, idx):
        calls["n"] += 1
        loss = (p["a"] ** 2).sum()
        if calls["n"] == 3:
            loss = loss * math.nan
        return loss, {"l": float(loss.detach())}

    with pytest.raises(TrainingDiverged) as ei:
        _run_epochs({"a": torch.ones(2, dtype=torch.float64)}, loss_fn, 4, TrainConfig(epochs=3, batch_size=2), ("l",))
    ck = ei.value.checkpoint
    assert torch.all(torch.isfinite(ck["a"])) and len(ei.value.history) == 1


def test_epoch_order_is_seeded():
    assert np.array_equal(epoch_order(10, 1, 2), epoch_order(10, 1, 2))
    assert not np.array_equal(epoch_order(50, 1, 2), epoch_order(50, 1, 3))
    assert sorted(epoch_order(10, 0, 0)) == list(range(10))


def test_loss_history_csv(tmp_path):
    h = LossHistory()
    h.append({"a": 1.0, "b": 0.1})
    h.append({"a": 0.5, "b": 1 / 3})
    h.to_csv(tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,term,value" and len(lines) == 5
    back = LossHistory.from_csv(tmp_path / "h.csv")
    assert back.records == h.records and back.terms == ["a", "b"]


def test_modes_and_slices():
    assert output_channels("main") == 1 and output_channels("multi") == 3
    assert label_slice("main") == slice(2, 3)
    with pytest.raises(SpecError):
        output_channels("side")


def test_metrics_known_values():
    y = [np.array([[1.0], [2.0]]), np.array([[0.0], [4.0]])]
    p = [np.array([[1.5], [2.0]]), np.array([[0.0], [1.0]])]
    m = metrics_from_predictions(p, y)
    assert m.per_sample_max == [0.5, 3.0]
    assert m.averaged_max_error == pytest.approx(1.75)
    assert m.rmse == [pytest.approx(math.sqrt((0.25 + 9) / 4))]
    assert m.relative_l2 == pytest.approx(0.5 * (0.5 / math.sqrt(5) + 3 / 4))
    d = m.to_dict()
    assert set(d) >= {"averaged_max_error_mm", "rmse_mm", "relative_l2"}
    assert list(d["rmse_mm"]) == ["u_z"]


def test_metrics_multi_axes(tmp_path, rng):
    y = [rng.normal(size=(5, 3)) for _ in range(2)]
    m = metrics_from_predictions(y, y, "multi")
    assert m.axes == ["u_x", "u_y", "u_z"] and m.rmse == [0.0, 0.0, 0.0]
    m.write(tmp_path / "m.json", tmp_path / "m.csv")
    assert json.loads((tmp_path / "m.json").read_text())["relative_l2"] == 0.0
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "sample,max_error_mm"


def test_split_samples():
    data = make_dataset(30, "frame", 0, DatasetConfig(n_points=64))
    tr, te, _ = split_samples(data, "dimension")
    assert all(s.spec.dims[0] > 400 and s.spec.dims[1] > 200 for s in te)
    rtr, rte, _ = split_samples(data, "random", seed=1)
    assert len(rte) == len(te) and len(rtr) + len(rte) == 30
    assert [s.spec for s in split_samples(data, "random", seed=1)[1]] == [s.spec for s in rte]
    with pytest.raises(SpecError):
        split_samples(data, "cross")


def test_tiny_pipeline_is_deterministic(tiny_data):
    cfg = TrainConfig(**TINY)
    d1, h1 = train_diffeo(tiny_data, cfg)
    d2, h2 = train_diffeo(tiny_data, cfg)
    assert h1.records == h2.records
    assert all(torch.equal(d1.tensors[k], d2.tensors[k]) for k in d1.tensors)
    assert h1.terms == ["l_inv", "l_smooth", "l_sim", "total"]
    m1, g1 = train_operator(tiny_data, d1, cfg)
    m2, g2 = train_operator(tiny_data, d1, cfg)
    assert g1.records == g2.records
    p1, p2 = predict(m1, d1, tiny_data[:2]), predict(m2, d1, tiny_data[:2])
    assert all(np.array_equal(a, b) for a, b in zip(p1, p2))
    assert p1[0].shape == (64, 1)
    met = evaluate(m1, d1, tiny_data)
    assert math.isfinite(met.relative_l2)
    with pytest.raises(SpecError):
        evaluate(m1, d1, tiny_data, mode="multi")
    q = diffeo_quality(d1, tiny_data[:2], m1.median_dims)
    assert 0.0 <= q.positive_det_fraction <= 1.0 and q.sim_unmapped > 0


def test_operator_training_reduces_loss(tiny_data):
    cfg = TrainConfig(**{**TINY, "epochs": 15, "learning_rate": 1e-2})
    _, h = train_operator(tiny_data, None, cfg)
    loss = h.term("relative_l2")
    assert loss[-1] < loss[0]
