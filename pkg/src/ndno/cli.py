"""Command-line entry point: ``ndno <command> [flags]``.

Exit codes: 0 success, 2 usage or input error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, io
from .geometry import FAMILIES, SpecError, median_dims
from .oracle import DatasetConfig, generalization_split, make_dataset
from .plots import histogram_svg, loss_curve_svg
from .training import (
    LossHistory,
    OperatorModel,
    TrainConfig,
    TrainingDiverged,
    ablation_run,
    evaluate,
    generalization_run,
    label_slice,
    metrics_from_predictions,
    predict,
    train_diffeo,
    train_operator,
)
from .transport import NumericError

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


def _config(args) -> TrainConfig:
    cfg = TrainConfig.from_json(args.config) if getattr(args, "config", None) else TrainConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "epochs", None) is not None:
        cfg.epochs = args.epochs
        cfg.diffeo_epochs = cfg.operator_epochs = None
    return cfg


def _out_dir(path) -> Path:
    if path is None:
        raise UsageError("--out is required")
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
        probe = p / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        raise UsageError(f"cannot write to {p}: {e}") from e
    return p


def _dataset(args, split=None):
    if not args.dataset:
        raise UsageError("--dataset is required")
    d = Path(args.dataset)
    if not (d / io.MANIFEST).is_file():
        raise UsageError(f"dataset {d} not found (no {io.MANIFEST})")
    m = io.read_manifest(d)
    samples = io.read_dataset(d, split)
    if not samples:
        raise UsageError(f"dataset {d} has no samples" + (f" in split {split!r}" if split else ""))
    return samples, m


def _manifest(out: Path, command: str, cfg, ds_hash, artifacts: dict, seed, t0: float, **extra) -> None:
    man = io.RunManifest(
        command=command,
        config=cfg.to_dict() if hasattr(cfg, "to_dict") else dict(cfg or {}),
        dataset_hash=ds_hash,
        artifacts=artifacts,
        seed=int(seed) if seed is not None else 0,
        wall_clock_s=round(time.perf_counter() - t0, 3),
    )
    p = man.write(out)
    if extra:
        d = json.loads(p.read_text())
        d.update(extra)
        p.write_text(json.dumps(d, indent=2, sort_keys=True, default=str))


def cmd_gen(args) -> int:
    t0 = time.perf_counter()
    if args.count is None or args.count < 1:
        raise UsageError("--count must be a positive integer")
    out = _out_dir(args.out)
    seed = 0 if args.seed is None else args.seed
    samples = make_dataset(args.count, args.family, seed, DatasetConfig(n_points=args.n_points))
    if args.split == "dimension":
        test = {id(s) for s in generalization_split(samples).test}
        tags = ["test" if id(s) in test else "train" for s in samples]
    else:
        k = int(round(args.test_fraction * len(samples)))
        perm = np.random.default_rng([seed, 0x5B17]).permutation(len(samples))
        test_idx = set(perm[:k].tolist())
        tags = ["test" if i in test_idx else "train" for i in range(len(samples))]
    extra = {
        "command": "gen",
        "family": args.family,
        "count": args.count,
        "seed": seed,
        "n_points": args.n_points,
        "split_rule": args.split or "random",
    }
    m = io.write_dataset(out, samples, tags, extra)
    m["wall_clock_s"] = round(time.perf_counter() - t0, 3)
    (out / io.MANIFEST).write_text(json.dumps(m, indent=2, sort_keys=True))
    print(f"wrote {len(samples)} samples to {out} (hash {m['dataset_hash'][:12]})")
    return EXIT_OK


def _write_history(out: Path, history: LossHistory, name: str) -> dict:
    csv_path = out / f"{name}_history.csv"
    history.to_csv(csv_path)
    arts = {"history": csv_path.name}
    if len(history):
        svg = out / f"{name}_loss.svg"
        loss_curve_svg(history, svg, title=f"{name} training loss")
        arts["loss_curve"] = svg.name
    return arts


def cmd_train_diffeo(args) -> int:
    t0 = time.perf_counter()
    cfg = _config(args)
    samples, m = _dataset(args, "train")
    out = _out_dir(args.out)
    med = median_dims([s.spec for s in samples])
    ckpt = out / "diffeo.ckpt"
    try:
        params, hist = train_diffeo(samples, cfg, med)
    except TrainingDiverged as e:
        if e.checkpoint is not None:
            from .diffeo import DiffeoNetParams

            io.save_diffeo(ckpt, DiffeoNetParams(cfg.diffeo_config(), e.checkpoint), {"median_dims": list(med), "diverged": True})
        raise
    io.save_diffeo(ckpt, params, {"median_dims": list(med)})
    arts = {"checkpoint": ckpt.name, **_write_history(out, hist, "diffeo")}
    _manifest(out, "train-diffeo", cfg, m.get("dataset_hash"), arts, cfg.seed, t0)
    print(f"diffeo trained for {len(hist)} epochs -> {ckpt}")
    return EXIT_OK


def _load_diffeo_arg(path):
    if not path:
        return None, None
    p = Path(path)
    if p.is_dir():
        p = p / "diffeo.ckpt"
    if not p.is_file():
        raise UsageError(f"diffeo checkpoint {p} not found")
    params, header = io.load_diffeo(p)
    return params, header


def _save_operator(path, model: OperatorModel, extra=None) -> None:
    io.save_operator(
        path,
        model.params,
        {
            "mode": model.mode,
            "ablate": model.ablate,
            "median_dims": list(model.median_dims),
            "scaler": model.scaler.to_dict(),
            **(extra or {}),
        },
    )


def _load_operator_arg(path) -> OperatorModel:
    from .operator import ChannelScaler

    if not path:
        raise UsageError("--operator is required")
    p = Path(path)
    if p.is_dir():
        p = p / "operator.ckpt"
    if not p.is_file():
        raise UsageError(f"operator checkpoint {p} not found")
    params, h = io.load_operator(p)
    return OperatorModel(params, ChannelScaler.from_dict(h["scaler"]), tuple(h["median_dims"]), h["mode"], h["ablate"])


def cmd_train_op(args) -> int:
    t0 = time.perf_counter()
    cfg = _config(args)
    samples, m = _dataset(args, "train")
    out = _out_dir(args.out)
    diffeo, dh = _load_diffeo_arg(args.diffeo)
    if diffeo is None and not args.ablate:
        raise UsageError("--diffeo checkpoint required unless --ablate is given")
    med = tuple(dh["median_dims"]) if dh and "median_dims" in dh else median_dims([s.spec for s in samples])
    mode = args.mode or "main"
    ckpt = out / "operator.ckpt"
    try:
        model, hist = train_operator(samples, None if args.ablate else diffeo, cfg, mode, ablate=args.ablate, med=med)
    except TrainingDiverged as e:
        if e.checkpoint is not None:
            from .operator import OperatorParams, standardize_channels

            cp = OperatorModel(
                OperatorParams(cfg.operator_config(mode), e.checkpoint), standardize_channels(samples), med, mode, args.ablate
            )
            _save_operator(ckpt, cp, {"diverged": True})
        raise
    _save_operator(ckpt, model)
    arts = {"checkpoint": ckpt.name, **_write_history(out, hist, "operator")}
    _manifest(out, "train-op", cfg, m.get("dataset_hash"), arts, cfg.seed, t0, mode=mode, ablate=bool(args.ablate))
    print(f"operator ({mode}{', ablated' if args.ablate else ''}) trained for {len(hist)} epochs -> {ckpt}")
    return EXIT_OK


def _check_mode(model: OperatorModel, args) -> None:
    if args.mode and args.mode != model.mode:
        raise UsageError(f"checkpoint was trained for mode {model.mode!r}, got --mode {args.mode}")


def _model_diffeo(model: OperatorModel, args):
    diffeo, _ = _load_diffeo_arg(args.diffeo)
    if diffeo is None and not model.ablate:
        raise UsageError("--diffeo checkpoint required for a non-ablated operator")
    return None if model.ablate else diffeo


def write_prediction(path, sample, pred: np.ndarray, mode: str) -> None:
    names = ["u_x", "u_y", "u_z"][label_slice(mode)]
    n = len(sample.cloud)
    header = {
        "spec": sample.spec.to_dict(),
        "channels": ["points", "sigma_xx", "sigma_yy", *names],
        "n_points": n,
        "dtype": "f64le",
        "kind": "prediction",
    }
    arrays = [sample.cloud.points.reshape(-1), sample.stress[:, 0], sample.stress[:, 1]]
    arrays += [pred[:, j] for j in range(pred.shape[1])]
    io._write_blob(path, io.SAMPLE_MAGIC, header, arrays)


def read_prediction(path) -> dict:
    header, body = io._read_blob(path, io.SAMPLE_MAGIC)
    n = int(header["n_points"])
    off, out = 0, {}
    for name in header["channels"]:
        size = 3 * n if name == "points" else n
        out[name], off = io._take(body, off, size, path)
    out["points"] = out["points"].reshape(n, 3)
    return out


def cmd_predict(args) -> int:
    t0 = time.perf_counter()
    model = _load_operator_arg(args.operator)
    _check_mode(model, args)
    diffeo = _model_diffeo(model, args)
    samples, m = _dataset(args, args.subset)
    out = _out_dir(args.out)
    preds = predict(model, diffeo, samples)
    files = []
    for i, (s, p) in enumerate(zip(samples, preds)):
        name = f"pred_{i:05d}.bin"
        write_prediction(out / name, s, p, model.mode)
        files.append(name)
    _manifest(out, "predict", {"mode": model.mode, "subset": args.subset}, m.get("dataset_hash"), {"predictions": files}, 0, t0)
    print(f"wrote {len(files)} predictions to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    t0 = time.perf_counter()
    samples, m = _dataset(args, args.subset)
    out = _out_dir(args.out)
    if args.predictions:
        pm = io.read_manifest(args.predictions)
        files = pm["artifacts"]["predictions"]
        if len(files) != len(samples):
            raise UsageError(f"{len(files)} predictions for {len(samples)} samples")
        preds = []
        for f in files:
            d = read_prediction(Path(args.predictions) / f)
            chans = [c for c in ("u_x", "u_y", "u_z") if c in d]
            preds.append(np.stack([d[c] for c in chans], axis=1))
        mode = "main" if preds[0].shape[1] == 1 else "multi"
        if args.mode and args.mode != mode:
            raise UsageError(f"predictions are {mode!r}, got --mode {args.mode}")
        metrics = metrics_from_predictions(preds, [s.deformation[:, label_slice(mode)] for s in samples], mode)
    else:
        model = _load_operator_arg(args.operator)
        _check_mode(model, args)
        metrics = evaluate(model, _model_diffeo(model, args), samples)
    metrics.write(out / "metrics.json", out / "per_sample.csv")
    histogram_svg(metrics.per_sample_max, out / "max_error_hist.svg", bins=args.bins)
    arts = {"metrics": "metrics.json", "per_sample": "per_sample.csv", "histogram": "max_error_hist.svg"}
    _manifest(out, "eval", {"bins": args.bins, "subset": args.subset}, m.get("dataset_hash"), arts, 0, t0)
    print(json.dumps({k: v for k, v in metrics.to_dict().items() if k != "per_sample_max_mm"}, indent=2))
    return EXIT_OK


def cmd_report(args) -> int:
    """Render SVGs from existing run directories (histories and metrics)."""
    t0 = time.perf_counter()
    out = _out_dir(args.out)
    runs = args.runs or []
    if not runs:
        raise UsageError("report needs at least one run directory")
    arts = {}
    for r in runs:
        r = Path(r)
        if not r.is_dir():
            raise UsageError(f"run directory {r} not found")
        for csv_path in sorted(r.glob("*_history.csv")):
            h = LossHistory.from_csv(csv_path)
            if not len(h):
                continue
            name = f"{r.name}_{csv_path.stem.replace('_history', '')}_loss.svg"
            loss_curve_svg(h, out / name, title=f"{r.name}: {csv_path.stem}")
            arts[name] = str(csv_path)
        mj = r / "metrics.json"
        if mj.is_file():
            per = json.loads(mj.read_text()).get("per_sample_max_mm", [])
            if per:
                name = f"{r.name}_max_error_hist.svg"
                histogram_svg(per, out / name, bins=args.bins)
                arts[name] = str(mj)
    if not arts:
        raise UsageError("no histories or metrics found in the given runs")
    _manifest(out, "report", {"bins": args.bins, "runs": [str(r) for r in runs]}, None, arts, 0, t0)
    print(f"wrote {len(arts)} plots to {out}")
    return EXIT_OK


def cmd_ablation(args) -> int:
    t0 = time.perf_counter()
    cfg = _config(args)
    train, m = _dataset(args, "train")
    test, _ = _dataset(args, "test")
    out = _out_dir(args.out)
    diffeo, _ = _load_diffeo_arg(args.diffeo)
    rep = ablation_run(train, test, cfg, args.mode or "main", diffeo)
    (out / "ablation.json").write_text(json.dumps(rep.to_dict(), indent=2))
    (out / "ablation.txt").write_text(rep.table() + "\n")
    _manifest(out, "ablation", cfg, m.get("dataset_hash"), {"report": "ablation.json", "table": "ablation.txt"}, cfg.seed, t0)
    print(rep.table())
    return EXIT_OK


def cmd_generalize(args) -> int:
    t0 = time.perf_counter()
    cfg = _config(args)
    samples, m = _dataset(args)
    out = _out_dir(args.out)
    split = args.split or "dimension"
    test_samples = None
    if split == "cross-family":
        if not args.test_dataset:
            raise UsageError("--split cross-family needs --test-dataset")
        test_samples = io.read_dataset(args.test_dataset)
    rep = generalization_run(samples, cfg, split, args.mode or "main", test_samples)
    (out / "generalization.json").write_text(json.dumps(rep.to_dict(), indent=2))
    (out / "generalization.txt").write_text(rep.table() + "\n")
    arts = {"report": "generalization.json", "table": "generalization.txt"}
    _manifest(out, "generalize", cfg, m.get("dataset_hash"), arts, cfg.seed, t0, split=split)
    print(rep.table())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ndno", description="Diffeomorphic mapping + geometry-aware neural operator.")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, dataset=True, out=True):
        if dataset:
            p.add_argument("--dataset", help="dataset directory (with manifest.json)")
        if out:
            p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, default=None)

    def training(p):
        p.add_argument("--config", help="JSON file mirroring TrainConfig")
        p.add_argument("--epochs", type=int, default=None)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    common(p, dataset=False)
    p.add_argument("--family", choices=FAMILIES, default="frame")
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--n-points", type=int, default=512)
    p.add_argument("--split", choices=("random", "dimension"), default=None)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train-diffeo", help="train the mapping network")
    common(p)
    training(p)
    p.set_defaults(func=cmd_train_diffeo)

    p = sub.add_parser("train-op", help="train the neural operator")
    common(p)
    training(p)
    p.add_argument("--diffeo", help="diffeo checkpoint or run directory")
    p.add_argument("--mode", choices=("main", "multi"), default=None)
    p.add_argument("--ablate", action="store_true", help="use original coordinates in place of mapped ones")
    p.set_defaults(func=cmd_train_op)

    helps = {"predict": "write predicted deformation fields", "eval": "score predictions against labels"}
    for name, fn in (("predict", cmd_predict), ("eval", cmd_eval)):
        p = sub.add_parser(name, help=helps[name])
        common(p)
        p.add_argument("--operator", help="operator checkpoint or run directory")
        p.add_argument("--diffeo", help="diffeo checkpoint or run directory")
        p.add_argument("--mode", choices=("main", "multi"), default=None)
        p.add_argument("--subset", choices=("train", "test"), default=None, help="restrict to one split tag")
        if name == "eval":
            p.add_argument("--predictions", help="prediction directory written by 'predict'")
            p.add_argument("--bins", type=int, default=30)
        p.set_defaults(func=fn)

    p = sub.add_parser("report", help="render SVG plots from run directories")
    common(p, dataset=False)
    p.add_argument("runs", nargs="*")
    p.add_argument("--bins", type=int, default=30)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("ablation", help="full model vs. original-coordinate model")
    common(p)
    training(p)
    p.add_argument("--diffeo", help="reuse a trained diffeo checkpoint")
    p.add_argument("--mode", choices=("main", "multi"), default=None)
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser("generalize", help="dimension / random / cross-family generalization run")
    common(p)
    training(p)
    p.add_argument("--split", choices=("random", "dimension", "cross-family"), default=None)
    p.add_argument("--test-dataset", help="test-family dataset for --split cross-family")
    p.add_argument("--mode", choices=("main", "multi"), default=None)
    p.set_defaults(func=cmd_generalize)
    return ap


def _threads() -> None:
    v = os.environ.get("NDNO_THREADS")
    if v:
        import torch

        try:
            n = int(v)
        except ValueError:
            raise UsageError(f"NDNO_THREADS must be an integer, got {v!r}") from None
        if n < 1:
            raise UsageError("NDNO_THREADS must be at least 1")
        torch.set_num_threads(n)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE
    try:
        _threads()
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SpecError, io.FormatError, FileNotFoundError, KeyError, json.JSONDecodeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
