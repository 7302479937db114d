"""Adam with cosine annealing, staged training, metrics, ablation and generalization runs.

Training happens in two stages.  The mapping network is fitted first on
(part, reference blank) pairs; it is then frozen, every sample is mapped
once, and the operator is trained on the mapped coordinates.
"""

from __future__ import annotations

import copy
import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch

from .diffeo import (
    DiffeoConfig,
    DiffeoNetParams,
    apply_mapping,
    init_diffeo_params,
    jacobian_at_points,
    mapping_loss,
)
from .geometry import SpecError, median_dims, normalize_coords, reference_blank
from .operator import (
    DTYPE,
    ChannelScaler,
    OperatorConfig,
    OperatorInput,
    OperatorParams,
    forward,
    init_operator_params,
    relative_l2_loss,
    standardize_channels,
)
from .oracle import generalization_split
from .transport import NumericError, sinkhorn_distance


@dataclass
class TrainConfig:
    # optimizer and loss coefficients
    batch_size: int = 4
    learning_rate: float = 1e-2
    epochs: int = 500
    beta1: float = 1e4
    beta2: float = 1e-3
    beta3: float = 1e5
    adam_beta_m: float = 0.9
    adam_beta_v: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    lr_min: float = 0.0
    # per-stage overrides (None: use the shared value above)
    diffeo_epochs: int | None = None
    operator_epochs: int | None = None
    diffeo_learning_rate: float | None = None
    operator_learning_rate: float | None = None
    diffeo_max_samples: int | None = None
    # model shapes
    n_points: int = 512
    operator_width: int = 32
    operator_layers: int = 4
    operator_modes: tuple = (8, 8, 4)
    operator_coord_scale: float = 0.5
    diffeo_width: int = 64
    diffeo_k: int = 16
    diffeo_context: int = 128
    # Sinkhorn settings for the similarity term
    eps_scale: float = 0.01
    sinkhorn_iters: int = 500
    sinkhorn_tol: float = 1e-6

    def __post_init__(self):
        self.operator_modes = tuple(int(m) for m in self.operator_modes)
        for name in ("batch_size", "learning_rate", "epochs", "adam_eps", "n_points"):
            if not getattr(self, name) > 0:
                raise SpecError(f"{name}: must be positive, got {getattr(self, name)}")
        for name in ("beta1", "beta2", "beta3", "lr_min"):
            if getattr(self, name) < 0:
                raise SpecError(f"{name}: must be non-negative, got {getattr(self, name)}")
        if not (0 <= self.adam_beta_m < 1 and 0 <= self.adam_beta_v < 1):
            raise SpecError("adam moment decays must lie in [0, 1)")

    def stage(self, which: str) -> "TrainConfig":
        """Copy with the shared epochs / learning rate replaced by a stage's overrides."""
        ep = getattr(self, f"{which}_epochs")
        lr = getattr(self, f"{which}_learning_rate")
        out = copy.copy(self)
        out.epochs = self.epochs if ep is None else ep
        out.learning_rate = self.learning_rate if lr is None else lr
        return out

    def diffeo_config(self) -> DiffeoConfig:
        return DiffeoConfig(width=self.diffeo_width, k=self.diffeo_k, n_context=self.diffeo_context)

    def operator_config(self, mode: str = "main") -> OperatorConfig:
        return OperatorConfig(
            width=self.operator_width,
            n_layers=self.operator_layers,
            modes=self.operator_modes,
            c_out=output_channels(mode),
            coord_scale=self.operator_coord_scale,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["operator_modes"] = list(self.operator_modes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"config: unknown keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def output_channels(mode: str) -> int:
    if mode == "main":
        return 1
    if mode == "multi":
        return 3
    raise SpecError(f"mode: expected 'main' or 'multi', got {mode!r}")


def label_slice(mode: str) -> slice:
    return slice(2, 3) if output_channels(mode) == 1 else slice(0, 3)


# optimizer


def cosine_lr(t: float, config: TrainConfig) -> float:
    """lr_min + (lr_max - lr_min)(1 + cos(pi t / epochs)) / 2."""
    E = config.epochs
    if not 0 <= t <= E:
        raise SpecError(f"t: epoch {t} outside [0, {E}]")
    lo, hi = config.lr_min, config.learning_rate
    return lo + 0.5 * (hi - lo) * (1.0 + math.cos(math.pi * t / E))


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, rate: float, config: TrainConfig):
    """One bias-corrected Adam update; returns new (params, state), inputs untouched."""
    b1, b2, eps = config.adam_beta_m, config.adam_beta_v, config.adam_eps
    for name, g in grads.items():
        if not torch.all(torch.isfinite(torch.as_tensor(g))):
            raise NumericError(f"non-finite gradient in parameter block {name!r}")
    t = state.step + 1
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = torch.zeros_like(p)
        m = state.m.get(name, torch.zeros_like(p))
        v = state.v.get(name, torch.zeros_like(p))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1**t)
        vh = v / (1 - b2**t)
        new_p[name] = p - rate * mh / (torch.sqrt(vh) + eps)
        new_m[name], new_v[name] = m, v
    return new_p, AdamState(step=t, m=new_m, v=new_v)


class TrainingDiverged(NumericError):
    """Loss became non-finite; ``checkpoint`` holds the last finite parameters."""

    def __init__(self, msg, checkpoint=None, history=None):
        super().__init__(msg)
        self.checkpoint = checkpoint
        self.history = history


@dataclass
class LossHistory:
    records: list = field(default_factory=list)  # one dict of term -> value per epoch

    def append(self, terms: dict) -> None:
        self.records.append({k: float(v) for k, v in terms.items()})

    def __len__(self) -> int:
        return len(self.records)

    def term(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records])

    @property
    def terms(self) -> list:
        return list(self.records[0]) if self.records else []

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "term", "value"])
            for e, rec in enumerate(self.records):
                for k, v in rec.items():
                    w.writerow([e, k, repr(v)])

    @classmethod
    def from_csv(cls, path) -> "LossHistory":
        recs: dict = {}
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                recs.setdefault(int(row["epoch"]), {})[row["term"]] = float(row["value"])
        return cls([recs[e] for e in sorted(recs)])


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([int(seed), int(epoch)]).permutation(n)


def _run_epochs(tensors: dict, loss_fn, n: int, config: TrainConfig, log_terms):
    """Shared minibatch loop; ``loss_fn(params, idx)`` returns (loss, term dict)."""
    state = AdamState()
    history = LossHistory()
    params = {k: v.detach().clone() for k, v in tensors.items()}
    for epoch in range(config.epochs):
        rate = cosine_lr(epoch, config)
        sums: dict = {}
        order = epoch_order(n, config.seed, epoch)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            leaves = {k: v.detach().requires_grad_(True) for k, v in params.items()}
            loss, terms = loss_fn(leaves, idx)
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"loss became {float(loss.detach())} at epoch {epoch}",
                    checkpoint={k: v.detach().clone() for k, v in params.items()},
                    history=history,
                )
            names = list(leaves)
            gs = torch.autograd.grad(loss, [leaves[k] for k in names], allow_unused=True)
            grads = {k: (g if g is not None else torch.zeros_like(leaves[k])) for k, g in zip(names, gs)}
            try:
                params, state = adam_step(params, grads, state, rate, config)
            except NumericError as e:
                raise TrainingDiverged(str(e), checkpoint=params, history=history) from e
            params = {k: v.detach() for k, v in params.items()}
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + float(v) * len(idx)
        history.append({k: sums[k] / n for k in log_terms})
    return params, history


# stage 1: mapping network


def normalized_pair(sample, med, n_points: int | None = None):
    """(part cloud, reference blank) in normalized coordinates around the part's box center."""
    center = sample.spec.center
    src = normalize_coords(sample.cloud, med, center).points
    blank = reference_blank(sample.spec, n_points or len(sample.cloud))
    tgt = normalize_coords(blank, med, center).points
    return src, tgt


def train_diffeo(samples, config: TrainConfig, med=None, init: DiffeoNetParams | None = None):
    """Minimize beta1*L_inv + beta2*L_smooth + beta3*L_sim over (part, blank) pairs."""
    samples = list(samples)
    if not samples:
        raise SpecError("train_diffeo: empty dataset")
    cfg = config.stage("diffeo")
    if cfg.diffeo_max_samples is not None:
        samples = samples[: cfg.diffeo_max_samples]
    med = median_dims([s.spec for s in samples]) if med is None else med
    pairs = [normalized_pair(s, med) for s in samples]
    params0 = init or init_diffeo_params(cfg.diffeo_config(), cfg.seed)
    dcfg = params0.config
    warm = [dict() for _ in pairs]
    betas = (cfg.beta1, cfg.beta2, cfg.beta3)
    sk = {"max_iters": cfg.sinkhorn_iters, "tol": cfg.sinkhorn_tol}

    def loss_fn(leaves, idx):
        p = DiffeoNetParams(dcfg, leaves)
        total, terms = 0.0, {"l_inv": 0.0, "l_smooth": 0.0, "l_sim": 0.0}
        for i in idx:
            rep = mapping_loss(p, pairs[i][0], pairs[i][1], betas, cfg.eps_scale, sk, warm[i])
            total = total + rep.total
            for k in terms:
                terms[k] += float(getattr(rep, k).detach()) / len(idx)
        total = total / len(idx)
        terms["total"] = float(total.detach())
        return total, terms

    tensors, history = _run_epochs(params0.tensors, loss_fn, len(pairs), cfg, ("l_inv", "l_smooth", "l_sim", "total"))
    return DiffeoNetParams(dcfg, tensors), history


@dataclass
class DiffeoQuality:
    positive_det_fraction: float
    sim_mapped: float
    sim_unmapped: float

    @property
    def reduction(self) -> float:
        return 1.0 - self.sim_mapped / self.sim_unmapped


def diffeo_quality(params: DiffeoNetParams, samples, med, epsilon_scale: float = 0.01) -> DiffeoQuality:
    """Fraction of points with det J > 0 and Sinkhorn similarity before/after mapping.

    All source points are evaluated; similarities are medians over samples.
    """
    pos, tot, sm, su = 0, 0, [], []
    for s in samples:
        src, tgt = normalized_pair(s, med)
        J = jacobian_at_points(params, src, tgt)
        det = np.linalg.det(J)
        pos += int(np.sum(det > 0))
        tot += len(det)
        mapped = apply_mapping(params, src, tgt).mapped_points
        eps = epsilon_scale * float(np.mean(((src[:, None] - tgt[None]) ** 2).sum(-1)))
        sm.append(sinkhorn_distance(mapped, tgt, epsilon=eps).cost_value)
        su.append(sinkhorn_distance(src, tgt, epsilon=eps).cost_value)
    return DiffeoQuality(pos / tot, float(np.median(sm)), float(np.median(su)))


# stage 2: operator


@dataclass
class OperatorModel:
    """Trained operator plus everything needed to run it on new samples."""

    params: OperatorParams
    scaler: ChannelScaler
    median_dims: tuple
    mode: str = "main"
    ablate: bool = False


@dataclass
class Prepared:
    stress: torch.Tensor  # (S, N, 2) standardized
    mapped: torch.Tensor  # (S, N, 3)
    original: torch.Tensor  # (S, N, 3)
    labels: torch.Tensor  # (S, N, c_out) mm

    def inputs(self, idx) -> OperatorInput:
        return OperatorInput(self.stress[idx], self.mapped[idx], self.original[idx])


def map_samples(samples, diffeo: DiffeoNetParams | None, med) -> list[np.ndarray]:
    """Mapped normalized coordinates of every sample (identity when ``diffeo`` is None)."""
    out = []
    for s in samples:
        src, tgt = normalized_pair(s, med)
        out.append(src if diffeo is None else apply_mapping(diffeo, src, tgt).mapped_points)
    return out


def prepare(samples, diffeo, med, scaler: ChannelScaler, mode: str, ablate: bool = False, mapped=None) -> Prepared:
    samples = list(samples)
    sizes = {len(s.cloud) for s in samples}
    if len(sizes) != 1:
        raise SpecError(f"samples must share one point count, got {sorted(sizes)}")
    orig = [normalize_coords(s.cloud, med, s.spec.center).points for s in samples]
    if ablate:
        mapped = orig
    elif mapped is None:
        mapped = map_samples(samples, diffeo, med)
    sl = label_slice(mode)
    return Prepared(
        stress=torch.as_tensor(np.stack([scaler.transform_stress(s.stress) for s in samples]), dtype=DTYPE),
        mapped=torch.as_tensor(np.stack(mapped), dtype=DTYPE),
        original=torch.as_tensor(np.stack(orig), dtype=DTYPE),
        labels=torch.as_tensor(np.stack([s.deformation[:, sl] for s in samples]), dtype=DTYPE),
    )


def _predict_tensor(params: OperatorParams, scaler: ChannelScaler, mode: str, inp: OperatorInput) -> torch.Tensor:
    return scaler.inverse_deformation(forward(params, inp), label_slice(mode))


def train_operator(
    samples,
    diffeo: DiffeoNetParams | None,
    config: TrainConfig,
    mode: str = "main",
    ablate: bool = False,
    med=None,
    mapped=None,
):
    """Fit the operator under the relative-L2 loss with the mapping frozen.

    ``diffeo=None`` (or ``ablate=True``) uses original coordinates in place of
    mapped ones.  ``mapped`` may carry precomputed mapped coordinates.
    Returns (OperatorModel, LossHistory).
    """
    samples = list(samples)
    if not samples:
        raise SpecError("train_operator: empty dataset")
    cfg = config.stage("operator")
    med = median_dims([s.spec for s in samples]) if med is None else tuple(med)
    scaler = standardize_channels(samples)
    data = prepare(samples, diffeo, med, scaler, mode, ablate, mapped)
    params0 = init_operator_params(cfg.operator_config(mode), cfg.seed)

    def loss_fn(leaves, idx):
        p = OperatorParams(params0.config, leaves)
        idx = torch.as_tensor(idx)
        loss = relative_l2_loss(_predict_tensor(p, scaler, mode, data.inputs(idx)), data.labels[idx])
        return loss, {"relative_l2": float(loss.detach())}

    tensors, history = _run_epochs(params0.tensors, loss_fn, len(samples), cfg, ("relative_l2",))
    model = OperatorModel(OperatorParams(params0.config, tensors), scaler, med, mode, ablate)
    return model, history


def predict(model: OperatorModel, diffeo: DiffeoNetParams | None, samples, mapped=None, batch: int = 16) -> list[np.ndarray]:
    """Per-sample deformation predictions (mm) on each sample's own points.

    Outputs computed on the reference domain belong to the mapped points;
    since mapping preserves point order they are read back on the source
    points directly (pullback).
    """
    samples = list(samples)
    data = prepare(samples, diffeo, model.median_dims, model.scaler, model.mode, model.ablate, mapped)
    out = []
    with torch.no_grad():
        for i in range(0, len(samples), batch):
            idx = torch.arange(i, min(i + batch, len(samples)))
            out.extend(_predict_tensor(model.params, model.scaler, model.mode, data.inputs(idx)).numpy())
    return out


@dataclass
class Metrics:
    averaged_max_error: float
    rmse: list
    relative_l2: float
    per_sample_max: list
    axes: list

    def to_dict(self) -> dict:
        return {
            "averaged_max_error_mm": self.averaged_max_error,
            "rmse_mm": dict(zip(self.axes, self.rmse)),
            "relative_l2": self.relative_l2,
            "per_sample_max_mm": list(self.per_sample_max),
        }

    def write(self, json_path, csv_path=None) -> None:
        with open(json_path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["sample", "max_error_mm"])
                for i, v in enumerate(self.per_sample_max):
                    w.writerow([i, repr(float(v))])


AXES = ("u_x", "u_y", "u_z")


def metrics_from_predictions(preds, labels, mode: str = "main") -> Metrics:
    """Averaged max |error|, per-axis RMSE (pooled over all points) and mean relative L2."""
    preds = [np.asarray(p, dtype=np.float64) for p in preds]
    labels = [np.asarray(y, dtype=np.float64) for y in labels]
    if not preds:
        raise SpecError("metrics: empty sample list")
    if len(preds) != len(labels):
        raise SpecError("metrics: prediction and label counts differ")
    axes = list(AXES[label_slice(mode)])
    per_max, sq, count, rel = [], np.zeros(len(axes)), 0, []
    for p, y in zip(preds, labels):
        p = p.reshape(len(p), -1)
        y = y.reshape(len(y), -1)
        if p.shape != y.shape:
            raise SpecError(f"metrics: shape mismatch {p.shape} vs {y.shape}")
        e = p - y
        per_max.append(float(np.abs(e).max()))
        sq += (e**2).sum(0)
        count += len(e)
        ny = np.linalg.norm(y)
        rel.append(float(np.linalg.norm(e) / ny) if ny > 0 else (0.0 if not e.any() else math.inf))
    return Metrics(
        averaged_max_error=float(np.mean(per_max)),
        rmse=[float(v) for v in np.sqrt(sq / count)],
        relative_l2=float(np.mean(rel)),
        per_sample_max=per_max,
        axes=axes,
    )


def evaluate(model: OperatorModel, diffeo, samples, mode: str | None = None, mapped=None) -> Metrics:
    samples = list(samples)
    if not samples:
        raise SpecError("evaluate: empty sample list")
    mode = model.mode if mode is None else mode
    if mode != model.mode:
        raise SpecError(f"mode: model was trained for {model.mode!r}, asked for {mode!r}")
    preds = predict(model, diffeo, samples, mapped)
    labels = [s.deformation[:, label_slice(mode)] for s in samples]
    return metrics_from_predictions(preds, labels, mode)


# harnesses


def _fmt_row(name, m: Metrics) -> str:
    rm = " ".join(f"{a}={v:.4g}" for a, v in zip(m.axes, m.rmse))
    return f"{name:<12} max_err={m.averaged_max_error:.4g} mm  rmse[{rm}] mm  rel_l2={m.relative_l2:.4g}"


@dataclass
class AblationReport:
    ndno: Metrics
    ablated: Metrics
    seed: int
    histories: dict = field(default_factory=dict)

    def table(self) -> str:
        return "\n".join([f"ablation (seed {self.seed})", _fmt_row("NDNO", self.ndno), _fmt_row("ablated", self.ablated)])

    def to_dict(self) -> dict:
        return {"seed": self.seed, "ndno": self.ndno.to_dict(), "ablated": self.ablated.to_dict()}


def ablation_run(train, test, config: TrainConfig, mode: str = "main", diffeo: DiffeoNetParams | None = None) -> AblationReport:
    """Train and score the full model and the original-coordinate model on identical data.

    Both arms use the same seed, so they see the same minibatch order and
    the same initial weights.  ``diffeo`` is trained here when not given.
    """
    train, test = list(train), list(test)
    med = median_dims([s.spec for s in train])
    hist = {}
    if diffeo is None:
        diffeo, hist["diffeo"] = train_diffeo(train, config, med)
    m_tr, m_te = map_samples(train, diffeo, med), map_samples(test, diffeo, med)
    full, hist["ndno"] = train_operator(train, diffeo, config, mode, med=med, mapped=m_tr)
    abl, hist["ablated"] = train_operator(train, None, config, mode, ablate=True, med=med)
    return AblationReport(
        ndno=evaluate(full, diffeo, test, mapped=m_te),
        ablated=evaluate(abl, None, test),
        seed=config.seed,
        histories=hist,
    )


@dataclass
class GeneralizationReport:
    split: str
    n_train: int
    n_test: int
    train_metrics: Metrics
    test_metrics: Metrics
    warning: str | None = None

    def table(self) -> str:
        head = f"generalization ({self.split}): train={self.n_train} test={self.n_test}"
        rows = [head, _fmt_row("train", self.train_metrics), _fmt_row("test", self.test_metrics)]
        if self.warning:
            rows.append(f"warning: {self.warning}")
        return "\n".join(rows)

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "train": self.train_metrics.to_dict(),
            "test": self.test_metrics.to_dict(),
            "warning": self.warning,
        }


def split_samples(samples, split: str, seed: int = 0, test_size: int | None = None, union: bool = False):
    """Returns (train, test, warning) for 'random' or 'dimension' splits.

    The random split draws the same test-set size as the dimension split
    unless ``test_size`` is given.
    """
    samples = list(samples)
    dim = generalization_split(samples, union=union) if split in ("dimension", "random") else None
    if split == "dimension":
        return dim.train, dim.test, dim.warning
    if split == "random":
        k = test_size if test_size is not None else max(1, len(dim.test))
        if not 0 < k < len(samples):
            raise SpecError(f"random split: test size {k} out of range for {len(samples)} samples")
        perm = np.random.default_rng([int(seed), 0x5B17]).permutation(len(samples))
        test_idx = set(perm[:k].tolist())
        return [s for i, s in enumerate(samples) if i not in test_idx], [samples[i] for i in sorted(test_idx)], None
    raise SpecError(f"split: expected 'random' or 'dimension', got {split!r}")


def generalization_run(
    samples,
    config: TrainConfig,
    split: str = "dimension",
    mode: str = "main",
    test_samples=None,
    test_size: int | None = None,
    diffeo: DiffeoNetParams | None = None,
) -> GeneralizationReport:
    """Train on one side of a split and evaluate on the other.

    ``split='cross-family'`` trains on ``samples`` and tests on
    ``test_samples`` (another family).
    """
    samples = list(samples)
    warning = None
    if split == "cross-family":
        if not test_samples:
            raise SpecError("cross-family split needs test_samples from another family")
        train, test = samples, list(test_samples)
    else:
        train, test, warning = split_samples(samples, split, config.seed, test_size)
    if not test:
        raise SpecError(f"{split} split: empty test side")
    if not train:
        raise SpecError(f"{split} split: empty train side")
    med = median_dims([s.spec for s in train])
    if diffeo is None:
        diffeo, _ = train_diffeo(train, config, med)
    model, _ = train_operator(train, diffeo, config, mode, med=med)
    return GeneralizationReport(
        split=split,
        n_train=len(train),
        n_test=len(test),
        train_metrics=evaluate(model, diffeo, train),
        test_metrics=evaluate(model, diffeo, test),
        warning=warning,
    )

