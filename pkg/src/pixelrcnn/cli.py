"""Command-line interface.

Subcommands: synth, train, eval, predict, lr-find, pca, inspect.
Exit codes: 0 success, 2 usage or data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import kernels
from .data import (
    SynthSpec,
    assemble_dataset,
    LabelMask,
    pca_csv,
    pca_project,
    read_csv_dataset,
    read_dataset,
    stacks_from_arrays,
    synth_generate,
    write_dataset,
)
from .errors import NumericError, ParameterError, PixelRcnnError
from .layers import (
    ModelConfig,
    PixelRcnnModel,
    load_checkpoint,
    model_forward,
    param_count,
    predict,
    save_checkpoint,
    with_config,
)
from .metrics import (
    confusion_from_labels,
    cohen_kappa,
    load_matrix_csv,
    overall_accuracy,
    render_csv,
    render_report,
)
from .training import (
    ScalerParams,
    TrainConfig,
    TrainingDiverged,
    fit,
    logistic_baseline_fit,
    lr_range_test,
    scaler_apply,
    scaler_fit,
    stratified_split,
)

log = logging.getLogger("pixelrcnn")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

CHECKPOINT_NAME = "checkpoint.prcn"
SCALER_NAME = "scaler.json"


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

_TRAIN_KEYS = {"epochs": "epochs", "batch": "batch_size", "beta1": "beta1", "beta2": "beta2", "eps": "eps",
               "schedule": "schedule"}
_SYNTH_KEYS = {"classes", "per_class", "noise", "shift_jitter", "offset_spread", "t", "b", "proportions", "total"}


def load_run_config(path: str | None) -> dict:
    """Read and validate a JSON run config; missing sections take defaults."""
    if path is None:
        raw = {}
    else:
        with open(path) as fh:
            raw = json.load(fh)
    unknown = set(raw) - {"model", "train", "data", "seed"}
    if unknown:
        raise ParameterError(f"unknown config sections: {sorted(unknown)}")
    model = ModelConfig.from_dict(raw.get("model", {}))
    train_raw = raw.get("train", {})
    bad = set(train_raw) - set(_TRAIN_KEYS)
    if bad:
        raise ParameterError(f"unknown train keys: {sorted(bad)}")
    train = TrainConfig.from_dict({_TRAIN_KEYS[k]: v for k, v in train_raw.items()})
    data = raw.get("data", {})
    bad = set(data) - {"path", "synth", "train_fraction"}
    if bad:
        raise ParameterError(f"unknown data keys: {sorted(bad)}")
    if "synth" in data:
        bad = set(data["synth"]) - _SYNTH_KEYS
        if bad:
            raise ParameterError(f"unknown synth keys: {sorted(bad)}")
    return {"model": model, "train": train, "data": data, "seed": raw.get("seed")}


def _seed(args, cfg) -> int:
    if args.seed is not None:
        return args.seed
    if cfg["seed"] is not None:
        return int(cfg["seed"])
    return 0


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _synth_spec(opts: dict, seed: int) -> SynthSpec:
    common = dict(
        t=int(opts.get("t", 9)),
        b=int(opts.get("b", 5)),
        noise=float(opts.get("noise", 0.15)),
        shift_jitter=float(opts.get("shift_jitter", 0.0)),
        offset_spread=float(opts.get("offset_spread", 1.0)),
        seed=seed,
    )
    if opts.get("proportions", "uniform") == "reference":
        return SynthSpec.reference_proportions(total=int(opts.get("total", 92116)), **common)
    return SynthSpec.uniform(int(opts.get("classes", 15)), int(opts.get("per_class", 200)), **common)


def _load_data(path: str, t: int | None = None):
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(path)
    if p.suffix.lower() == ".csv":
        return read_csv_dataset(p, t=t)
    return read_dataset(p)


def _dataset_from(args, cfg, seed):
    if getattr(args, "data", None):
        return _load_data(args.data, cfg["model"].t)
    data = cfg["data"]
    if "path" in data:
        return _load_data(data["path"], cfg["model"].t)
    if "synth" in data:
        return synth_generate(_synth_spec(data["synth"], seed))
    raise ParameterError("no dataset given (use --data or a config data section)")


def _train_fraction(args, cfg) -> float:
    if getattr(args, "train_fraction", None) is not None:
        return args.train_fraction
    return float(cfg["data"].get("train_fraction", 0.6))


def _load_scaler(args, checkpoint: Path) -> ScalerParams | None:
    if getattr(args, "no_scale", False):
        return None
    path = Path(args.scaler) if getattr(args, "scaler", None) else checkpoint.with_name(SCALER_NAME)
    if not path.exists():
        raise FileNotFoundError(f"scaler file {path} (pass --scaler or --no-scale)")
    return ScalerParams.from_json(path.read_text())


def _write(path: Path, text: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args, cfg) -> int:
    seed = _seed(args, cfg)
    opts = dict(cfg["data"].get("synth", {}))
    for key in _SYNTH_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            opts[key] = val
    ds = synth_generate(_synth_spec(opts, seed))
    path = _out(args) / args.file
    write_dataset(ds, path)
    print(f"wrote {path}: i={len(ds)} t={ds.t} b={ds.b} K={ds.K}")
    for name, n in zip(ds.class_names, ds.class_counts()):
        print(f"  {name:<14s} {int(n):>7d}")
    return EXIT_OK


def _model_config(args, cfg) -> ModelConfig:
    mc = cfg["model"]
    changes = {}
    if args.peepholes:
        changes["peepholes"] = True
    if args.tdd_relu:
        changes["tdd_relu"] = True
    if args.dropout is not None:
        changes["dropout_p"] = args.dropout
    return replace(mc, **changes) if changes else mc


def _train_config(args, cfg, seed) -> TrainConfig:
    tc = cfg["train"]
    sched = tc.schedule
    if args.eta_max is not None:
        sched = replace(sched, eta_max=args.eta_max)
    if args.eta_min is not None:
        sched = replace(sched, eta_min=args.eta_min)
    if args.period is not None:
        sched = replace(sched, period=args.period)
    return replace(
        tc,
        epochs=args.epochs if args.epochs is not None else tc.epochs,
        batch_size=args.batch if args.batch is not None else tc.batch_size,
        seed=seed,
        schedule=sched,
    )


def _prepared_splits(ds, frac, seed):
    train, test = stratified_split(ds, frac, seed)
    scaler = scaler_fit(train)
    return scaler_apply(scaler, train, np.float32), scaler_apply(scaler, test, np.float32), scaler


def cmd_train(args, cfg) -> int:
    seed = _seed(args, cfg)
    ds = _dataset_from(args, cfg, seed)
    mc = _model_config(args, cfg)
    if (ds.t, ds.b) != (mc.t, mc.b) or ds.K != mc.K:
        mc = replace(mc, t=ds.t, b=ds.b, K=ds.K)
        log.info("model config adapted to data: t=%d b=%d K=%d", mc.t, mc.b, mc.K)
    tc = _train_config(args, cfg, seed)
    train, test, scaler = _prepared_splits(ds, _train_fraction(args, cfg), seed)
    model = PixelRcnnModel.init(mc, seed=seed)
    out = _out(args)
    print(f"backend={kernels.BACKEND} params={param_count(model)} train={len(train)} test={len(test)}")

    def progress(rec):
        if not args.quiet:
            print(f"epoch {rec.epoch:4d}  lr={rec.lr:.3e}  loss={rec.train_loss:.5f}  "
                  f"train_OA={rec.train_oa:.4f}  test_OA={rec.test_oa:.4f}")

    try:
        report = fit(model, train, tc, test, progress=progress)
    except TrainingDiverged as exc:
        _write(out / "report.csv", exc.report.to_csv())
        _write(out / "report.json", exc.report.to_json())
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    save_checkpoint(model, out / CHECKPOINT_NAME)
    _write(out / SCALER_NAME, scaler.to_json())
    _write(out / "report.csv", report.to_csv())
    _write(out / "report.json", report.to_json())
    print(json.dumps(report.final, sort_keys=True))
    return EXIT_OK


def _split_for_eval(ds, which, frac, seed):
    if which == "all":
        return ds
    train, test = stratified_split(ds, frac, seed)
    return train if which == "train" else test


def cmd_eval(args, cfg) -> int:
    if args.fixture:
        if not Path(args.fixture).exists():
            raise FileNotFoundError(args.fixture)
        cm = load_matrix_csv(args.fixture)
    else:
        if not args.checkpoint:
            raise ParameterError("eval needs --checkpoint (or --fixture)")
        ckpt = Path(args.checkpoint)
        if not ckpt.exists():
            raise FileNotFoundError(args.checkpoint)
        model = load_checkpoint(ckpt)
        seed = _seed(args, cfg)
        ds = _dataset_from(args, cfg, seed)
        if (ds.t, ds.b) != (model.config.t, model.config.b) or ds.K != model.config.K:
            raise ParameterError(
                f"data (t={ds.t}, b={ds.b}, K={ds.K}) does not match the checkpoint "
                f"(t={model.config.t}, b={model.config.b}, K={model.config.K})")
        frac = _train_fraction(args, cfg)
        part = _split_for_eval(ds, args.split, frac, seed)
        scaler = _load_scaler(args, ckpt)
        X = part.X if scaler is None else scaler_apply(scaler, part.X, np.float32)
        cm = confusion_from_labels(part.labels, predict(model, X), ds.K, ds.class_names)
    text = render_report(cm)
    print(text, end="")
    if args.baseline and not args.fixture:
        train, test, _ = _prepared_splits(ds, frac, seed)
        _, oa = logistic_baseline_fit(train, test, replace(cfg["train"], seed=seed))
        line = f"logistic baseline OA (test split) = {oa:.5f}"
        print(line)
        text += line + "\n"
    if args.out:
        out = _out(args)
        _write(out / "eval_report.txt", text)
        _write(out / "eval_report.csv", render_csv(cm))
    return EXIT_OK


def _write_pgm(path: Path, grid: np.ndarray, maxval: int) -> None:
    h, w = grid.shape
    lines = ["P2", f"{w} {h}", str(maxval)]
    lines += [" ".join(str(int(v)) for v in row) for row in grid]
    _write(path, "\n".join(lines) + "\n")


def cmd_predict(args, cfg) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise FileNotFoundError(args.checkpoint)
    model = load_checkpoint(ckpt)
    src = Path(args.input)
    if not src.exists():
        raise FileNotFoundError(args.input)
    if src.suffix.lower() == ".npz":
        arrays = dict(np.load(src))
        h, w = arrays["B2"].shape[1:]
        mask = arrays.get("mask")
        grid_ids = np.zeros((h, w), dtype=np.int64) if mask is None else np.where(mask >= 0, 0, -1)
        ds = assemble_dataset(stacks_from_arrays(arrays), LabelMask(grid_ids, ["pixel"]))
        cells = np.argwhere(grid_ids >= 0)
    else:
        ds = _load_data(str(src), model.config.t)
        w = args.width or int(math.ceil(math.sqrt(len(ds))))
        h = -(-len(ds) // w)
        cells = np.array([divmod(k, w) for k in range(len(ds))], dtype=np.int64).reshape(-1, 2)
    if (ds.t, ds.b) != (model.config.t, model.config.b):
        raise ParameterError(f"input samples are {ds.t}x{ds.b}, model expects "
                             f"{model.config.t}x{model.config.b}")
    scaler = _load_scaler(args, ckpt)
    X = ds.X if scaler is None else scaler_apply(scaler, ds.X, np.float32)
    classes = predict(model, X)
    nodata = 255
    grid = np.full((h, w), nodata, dtype=np.int64)
    grid[cells[:, 0], cells[:, 1]] = classes
    out = _out(args)
    _write_pgm(out / "classes.pgm", grid, nodata)
    rows = ["row,col,class"] + [f"{r},{c},{k}" for (r, c), k in zip(cells.tolist(), classes.tolist())]
    _write(out / "classes.csv", "\n".join(rows) + "\n")
    print(f"wrote {out / 'classes.pgm'} ({h}x{w}) and {out / 'classes.csv'} ({len(classes)} pixels)")
    return EXIT_OK


def cmd_lr_find(args, cfg) -> int:
    seed = _seed(args, cfg)
    ds = _dataset_from(args, cfg, seed)
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
    else:
        mc = replace(cfg["model"], t=ds.t, b=ds.b, K=ds.K)
        model = PixelRcnnModel.init(mc, seed=seed)
    train, _, _ = _prepared_splits(ds, _train_fraction(args, cfg), seed)
    tc = cfg["train"]
    res = lr_range_test(model, train, args.lo, args.hi, args.iters, tc.batch_size, seed,
                        tc.beta1, tc.beta2, tc.eps)
    out = _out(args)
    _write(out / "lr_find.csv", res.to_csv())
    print(f"suggested eta_max = {res.suggestion!r}  ({len(res.lrs)} of {args.iters} steps recorded)")
    return EXIT_OK


def cmd_pca(args, cfg) -> int:
    seed = _seed(args, cfg)
    ds = _dataset_from(args, cfg, seed)
    res = pca_project(ds, args.components)
    pts, rat = pca_csv(res, ds.labels)
    out = _out(args)
    _write(out / "pca_points.csv", pts)
    _write(out / "pca_ratios.csv", rat)
    print(f"explained variance of first {args.components}: {float(res.cumulative[args.components - 1]):.4f}")
    return EXIT_OK


def cmd_inspect(args, cfg) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise FileNotFoundError(args.checkpoint)
    model = load_checkpoint(ckpt)
    seed = _seed(args, cfg)
    ds = _dataset_from(args, cfg, seed)
    if args.samples:
        idx = [int(s) for s in args.samples.split(",")]
    else:
        idx = np.flatnonzero(ds.labels == args.cls)[: args.count].tolist()
    if not idx or max(idx) >= len(ds) or min(idx) < 0:
        raise ParameterError("no valid sample indices selected")
    scaler = _load_scaler(args, ckpt)
    X = ds.X[idx] if scaler is None else scaler_apply(scaler, ds.X[idx], np.float32)
    _, cache = model_forward(model, X, "eval")
    out = _out(args)
    for k, i in enumerate(idx):
        act = cache.y_timeD[k]
        rows = [",".join(f"f{j}" for j in range(act.shape[1]))]
        rows += [",".join(repr(float(v)) for v in r) for r in act]
        _write(out / f"inspect_{i}.csv", "\n".join(rows) + "\n")
    if len(idx) > 1:
        corr = np.corrcoef(cache.y_timeD.reshape(len(idx), -1))
        print("pairwise correlation of activation maps:")
        for row in corr:
            print("  " + " ".join(f"{v:6.3f}" for v in row))
    print(f"wrote {len(idx)} activation maps ({model.config.t}x{model.config.d_out}) to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="unsigned 64-bit seed")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="pixelrcnn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--classes", type=int)
    s.add_argument("--per-class", dest="per_class", type=int)
    s.add_argument("--noise", type=float)
    s.add_argument("--shift-jitter", dest="shift_jitter", type=float)
    s.add_argument("--offset-spread", dest="offset_spread", type=float)
    s.add_argument("--t", type=int)
    s.add_argument("--b", type=int)
    s.add_argument("--proportions", choices=["uniform", "reference"])
    s.add_argument("--total", type=int, help="sample count in reference mode")
    s.add_argument("--file", default="dataset.pxrc")
    s.set_defaults(func=cmd_synth)

    def data_args(q):
        q.add_argument("--data", help="dataset file (.pxrc or .csv)")
        q.add_argument("--train-fraction", dest="train_fraction", type=float)

    t = sub.add_parser("train", parents=[common], help="split, scale and train")
    data_args(t)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--eta-max", dest="eta_max", type=float)
    t.add_argument("--eta-min", dest="eta_min", type=float)
    t.add_argument("--period", type=int)
    t.add_argument("--dropout", type=float)
    t.add_argument("--peepholes", action="store_true")
    t.add_argument("--tdd-relu", dest="tdd_relu", action="store_true")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="confusion matrix and accuracy report")
    data_args(e)
    e.add_argument("--checkpoint")
    e.add_argument("--scaler")
    e.add_argument("--no-scale", dest="no_scale", action="store_true")
    e.add_argument("--split", choices=["all", "train", "test"], default="all")
    e.add_argument("--baseline", action="store_true")
    e.add_argument("--fixture", help="confusion-matrix CSV to report on without a model")
    e.set_defaults(func=cmd_eval, out=None)

    pr = sub.add_parser("predict", parents=[common], help="per-pixel class map")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--input", required=True, help=".pxrc/.csv dataset or .npz band grids")
    pr.add_argument("--scaler")
    pr.add_argument("--no-scale", dest="no_scale", action="store_true")
    pr.add_argument("--width", type=int, help="grid width when the input is a dataset")
    pr.set_defaults(func=cmd_predict)

    lf = sub.add_parser("lr-find", parents=[common], help="learning-rate range test")
    data_args(lf)
    lf.add_argument("--checkpoint")
    lf.add_argument("--lo", type=float, default=1e-5)
    lf.add_argument("--hi", type=float, default=1.0)
    lf.add_argument("--iters", type=int, default=100)
    lf.set_defaults(func=cmd_lr_find)

    pc = sub.add_parser("pca", parents=[common], help="PCA projection and explained variance")
    data_args(pc)
    pc.add_argument("--components", type=int, default=3)
    pc.set_defaults(func=cmd_pca)

    ins = sub.add_parser("inspect", parents=[common], help="dump time-distributed activations")
    data_args(ins)
    ins.add_argument("--checkpoint", required=True)
    ins.add_argument("--scaler")
    ins.add_argument("--no-scale", dest="no_scale", action="store_true")
    ins.add_argument("--samples", help="comma-separated sample indices")
    ins.add_argument("--class", dest="cls", type=int, default=0)
    ins.add_argument("--count", type=int, default=4)
    ins.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_run_config(args.config)
        return args.func(args, cfg)
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (PixelRcnnError, json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
