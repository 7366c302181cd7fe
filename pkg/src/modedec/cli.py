"""Command-line front end: ``modedec <command> ...``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import datagen
from .config import RunConfig
from .datagen import Dataset, LabeledExample, split_train_val
from .exceptions import (DataIngestionError, DivergenceError, InvalidInputError,
                         ModelFormatError, SingularMatrixError)
from .model import VARIANTS, Model, ModelConfig, load_model, save_model
from .signal import (Signal, TimeGrid, add_noise_snr, read_components_csv, read_signal_csv,
                     write_components_csv, write_signal_csv)
from .trainer import METRIC_NAMES, History, evaluate_predictions, grid_search, train
from .tvd import TvdParams, tvd_denoise

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
MANIFEST = "manifest.json"
CONFIG_NAME = "config.ini"

logger = logging.getLogger("modedec")


class UsageError(Exception):
    pass


# -- helpers -----------------------------------------------------------------

def n_workers() -> int:
    """Worker cap from ``MODEDEC_THREADS`` (default 1)."""
    raw = os.environ.get("MODEDEC_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"MODEDEC_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("MODEDEC_THREADS must be >= 1")
    return n


def _map(fn, items):
    workers = n_workers()
    if workers == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))  # keeps input order


def _prepare_dir(path, force: bool) -> Path:
    path = Path(path)
    if path.exists():
        if not path.is_dir():
            raise UsageError(f"{path} exists and is not a directory")
        if any(path.iterdir()):
            if not force:
                raise UsageError(f"{path} is not empty; pass --force to overwrite")
            shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _prepare_file(path, force: bool) -> Path:
    path = Path(path)
    if path.exists() and not force:
        raise UsageError(f"{path} exists; pass --force to overwrite")
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _run_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {}
    for attr, key in (("M", ("model", "M")), ("S", ("model", "S")), ("K", ("model", "K")),
                      ("variant", ("model", "variant")),
                      ("epochs", ("train", "epochs")), ("batch_size", ("train", "batch_size")),
                      ("lr", ("train", "lr")), ("patience", ("train", "early_stop_patience")),
                      ("seed", ("train", "seed")), ("eta_qtv", ("train", "eta_qtv")),
                      ("tvd_lambda", ("tvd", "lambda")), ("tvd_nit", ("tvd", "nit")),
                      ("n", ("grid", "n"))):
        if getattr(args, attr, None) is not None:
            overrides[key] = getattr(args, attr)
    return cfg.with_overrides(overrides)


def _echo_config(cfg: RunConfig, path) -> None:
    cfg.write(path)


def latency_stats(seconds) -> dict:
    s = np.asarray(seconds, dtype=float)
    return {"count": int(s.size), "mean_s": float(s.mean()), "median_s": float(np.median(s)),
            "p95_s": float(np.percentile(s, 95)), "min_s": float(s.min()),
            "max_s": float(s.max()), "total_s": float(s.sum())}


def _write_latency(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("signal,seconds,reconstruction_max_error\n")
        for name, sec, err in rows:
            fh.write(f"{name},{sec!r},{err!r}\n")


# -- data directories --------------------------------------------------------

def write_data_dir(out: Path, dataset: Dataset, meta: dict) -> dict:
    (out / "features").mkdir()
    has_labels = all(e.labels is not None for e in dataset.examples)
    if has_labels:
        (out / "labels").mkdir()
    files = []
    for i, ex in enumerate(dataset.examples):
        name = f"{i:06d}.csv"
        write_signal_csv(out / "features" / name, ex.feature)
        if has_labels:
            write_components_csv(out / "labels" / name, ex.feature.t, ex.labels)
        files.append({"name": name, "meta": ex.meta})
    grid = dataset.examples[0].feature.grid
    manifest = {
        **meta,
        "count": len(dataset.examples),
        "n_components": dataset.n_components if has_labels else None,
        "grid": {"t_start": grid.t_start, "t_end": grid.t_end, "n": grid.n},
        "split": {"train": [int(i) for i in dataset.train_idx],
                  "val": [int(i) for i in dataset.val_idx]},
        "files": files,
    }
    with open(out / MANIFEST, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
    return manifest


def read_data_dir(path, require_labels: bool = True) -> Dataset:
    """Load a directory written by ``gen-data`` (or any features/labels pair of folders)."""
    path = Path(path)
    feat_dir = path / "features"
    if not feat_dir.is_dir():
        raise DataIngestionError(f"{path}: no features/ directory")
    manifest = {}
    if (path / MANIFEST).is_file():
        with open(path / MANIFEST, encoding="utf-8") as fh:
            manifest = json.load(fh)
    names = sorted(p.name for p in feat_dir.glob("*.csv"))
    if not names:
        raise DataIngestionError(f"{feat_dir}: no CSV files")
    examples = []
    for name in names:
        feature = read_signal_csv(feat_dir / name)
        label_path = path / "labels" / name
        if label_path.is_file():
            _, comps, _ = read_components_csv(label_path, with_residue=False)
            if comps.shape[1] != feature.grid.n:
                raise DataIngestionError(
                    f"{label_path}: {comps.shape[1]} samples, feature has {feature.grid.n}")
            examples.append(LabeledExample(feature, comps, {"file": name}))
        elif require_labels:
            raise DataIngestionError(f"{name}: label file {label_path} missing")
        else:
            examples.append(_Unlabeled(feature, {"file": name}))
    if require_labels:
        m = {e.n_components for e in examples}
        if len(m) != 1:
            raise DataIngestionError(f"{path}: component count varies across label files")
    split = manifest.get("split", {})
    if split.get("train") and split.get("val"):
        return Dataset(examples, np.array(split["train"]), np.array(split["val"]),
                       manifest.get("seed"))
    if len(examples) >= 5:
        return split_train_val(Dataset(examples), manifest.get("seed", 0) or 0)
    return Dataset(examples)


class _Unlabeled:
    def __init__(self, feature, meta):
        self.feature = feature
        self.labels = None
        self.meta = meta


# -- commands ----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _run_config(args)
    grid = cfg.grid
    families = tuple(args.families.split(","))
    meta = {"dataset": args.dataset, "seed": args.seed}
    if args.dataset == "d1":
        ds = datagen.gen_dataset1(grid, families, split_seed=args.seed)
        meta["families"] = list(families)
    elif args.dataset == "d2":
        ds = datagen.gen_dataset2(grid, seed=args.seed, families=families, split_seed=args.seed)
        meta.update(families=list(families), snr_db=datagen.TRAIN_SNR_DB)
    elif args.dataset in ("x1", "x2"):
        ex = datagen.test_signal_x1(grid) if args.dataset == "x1" else datagen.test_signal_x2(grid, args.seed)
        ds = Dataset([ex])
    else:
        if not args.series:
            raise UsageError("--dataset real needs --series")
        windows = datagen.window_series(read_signal_csv(args.series), args.window, args.stride)
        if args.labels_dir:
            label_files = sorted(Path(args.labels_dir).glob("*.csv"))
            ds = datagen.attach_labels(windows, label_files, split_seed=args.seed)
        else:
            ds = Dataset([_Unlabeled(w, {"window": i}) for i, w in enumerate(windows)])
        meta.update(series=str(args.series), window=args.window, stride=args.stride)
    if args.limit is not None:
        if args.limit < 1:
            raise UsageError("--limit must be >= 1")
        sub = ds.examples[:args.limit]
        ds = split_train_val(Dataset(sub), args.seed) if len(sub) >= 5 else Dataset(sub)
        meta["limit"] = args.limit
    out = _prepare_dir(args.out, args.force)
    manifest = write_data_dir(out, ds, meta)
    _echo_config(cfg, out / CONFIG_NAME)
    print(f"wrote {manifest['count']} examples to {out}")
    return EXIT_OK


def _check_model_data(model_cfg, ds: Dataset):
    if ds.n_components != model_cfg.M:
        raise DataIngestionError(
            f"labels have {ds.n_components} components but the model config has M={model_cfg.M}")
    n = ds.examples[0].feature.grid.n
    if n < model_cfg.K:
        raise DataIngestionError(f"signals of length {n} are shorter than K={model_cfg.K}")


def cmd_train(args) -> int:
    ds = read_data_dir(args.data)
    if not ds.has_split:
        raise DataIngestionError(f"{args.data}: need at least 5 examples for a train/validation split")
    resume_state = None
    if args.resume:
        model, extra = load_model(args.resume, return_extra=True)
        if "training_state" not in extra:
            raise DataIngestionError(f"{args.resume}: checkpoint has no training state to resume")
        base = RunConfig.from_string(extra["run_config"])
        cfg = _run_config_over(args, base)
        resume_state = extra["training_state"]
        if cfg.resolved_model() != model.config:
            raise UsageError("model options cannot change when resuming")
    else:
        if args.M is None:
            args.M = ds.n_components
        cfg = _run_config(args)
        model = Model(cfg.resolved_model(), seed=cfg.train.seed)
    _check_model_data(model.config, ds)
    out = _prepare_dir(args.out_dir, args.force)
    _echo_config(cfg, out / CONFIG_NAME)
    print(cfg.to_string(), end="")

    def progress(epoch, h: History):
        print(f"epoch {epoch}: train_loss={h.train_loss[-1]:.6g} val_loss={h.val_loss[-1]:.6g} "
              f"val_mae={h.val_metrics[-1]['mae']:.5g}", flush=True)

    model, history = train(model, ds, cfg.train, resume_state=resume_state,
                           callback=None if args.quiet else progress)
    save_model(out / "model.json", model, extra={
        "run_config": cfg.to_string(), "history": history.to_dict(),
        "training_state": model.training_state})
    history.write_csv(out / "history.csv")
    print(f"best epoch {history.best_epoch}, val_loss {history.best_val_loss:.6g}; "
          f"checkpoint {out / 'model.json'}")
    return EXIT_OK


def _run_config_over(args, base: RunConfig) -> RunConfig:
    overrides = {}
    for attr, key in (("epochs", ("train", "epochs")), ("batch_size", ("train", "batch_size")),
                      ("lr", ("train", "lr")), ("patience", ("train", "early_stop_patience"))):
        if getattr(args, attr, None) is not None:
            overrides[key] = getattr(args, attr)
    return base.with_overrides(overrides)


def _decompose_one(model: Model, signal: Signal):
    t0 = time.perf_counter()
    cs = model.decompose(signal.values)
    elapsed = time.perf_counter() - t0
    err = float(np.max(np.abs(cs.reconstruct() - signal.values)))
    return cs, elapsed, err


def cmd_decompose(args) -> int:
    model = load_model(args.model)
    src = Path(args.input)
    if src.is_dir():
        files = sorted(src.glob("*.csv"))
        if not files:
            raise DataIngestionError(f"{src}: no CSV files")
        out = _prepare_dir(args.out, args.force)

        def work(path):
            sig = read_signal_csv(path)
            cs, sec, err = _decompose_one(model, sig)
            write_components_csv(out / path.name, sig.t, cs.components, cs.residue)
            return path.name, sec, err

        rows = _map(work, files)
        _write_latency(out / "latency.csv", rows)
        stats = latency_stats([r[1] for r in rows])
        with open(out / "latency_summary.json", "w", encoding="utf-8") as fh:
            json.dump(stats, fh, indent=1)
        RunConfig(model=model.config).write(out / CONFIG_NAME)
        print(_format_stats(stats))
        print(f"reconstruction max error: {max(r[2] for r in rows):.3e}", file=sys.stderr)
        return EXIT_OK
    sig = read_signal_csv(src)
    out = _prepare_file(args.out, args.force)
    cs, _, err = _decompose_one(model, sig)
    write_components_csv(out, sig.t, cs.components, cs.residue)
    RunConfig(model=model.config).write(out.with_name(out.name + ".config.ini"))
    print(f"reconstruction max error: {err:.3e}", file=sys.stderr)
    return EXIT_OK


def _format_stats(stats: dict) -> str:
    return (f"signals={stats['count']} mean={stats['mean_s'] * 1e3:.2f}ms "
            f"median={stats['median_s'] * 1e3:.2f}ms p95={stats['p95_s'] * 1e3:.2f}ms "
            f"max={stats['max_s'] * 1e3:.2f}ms total={stats['total_s']:.2f}s")


def cmd_eval(args) -> int:
    model = load_model(args.model)
    ds = read_data_dir(args.data, require_labels=True)
    if ds.n_components != model.config.M:
        raise DataIngestionError(
            f"labels have {ds.n_components} components, model emits {model.config.M}")
    split = args.split
    if split == "auto":
        split = "val" if ds.has_split else "all"
    if split == "val" and not ds.has_split:
        raise DataIngestionError(f"{args.data} has no validation split")
    examples = ds.val if split == "val" else ds.examples
    out = _prepare_dir(args.out_dir, args.force)
    preds = _map(lambda e: model.decompose(e.feature.values).components, examples)
    report = evaluate_predictions(preds, [e.labels for e in examples])
    report.write_csv(out / "report.csv")
    true_rep = evaluate_predictions([e.labels for e in examples], [e.labels for e in examples])
    with open(out / "per_example.csv", "w", encoding="utf-8") as fh:
        fh.write("example,component," + ",".join(METRIC_NAMES) + ",label_tv\n")
        for e, reps, trues in zip(examples, report.per_example, true_rep.per_example):
            for m, (r, tr) in enumerate(zip(reps, trues)):
                fh.write(f"{e.meta.get('file', '')},imf{m + 1},"
                         + ",".join(repr(getattr(r, k)) for k in METRIC_NAMES)
                         + f",{tr.tv!r}\n")
    RunConfig(model=model.config).write(out / CONFIG_NAME)
    if args.plot:
        from .plots import plot_components

        (out / "plots").mkdir()
        for e, p in zip(examples, preds):
            name = Path(e.meta.get("file", "example")).stem
            plot_components(out / "plots" / f"{name}.svg", e.feature.t, p, e.labels, title=name)
    print(f"{'scope':<28}" + "".join(f"{m:>12}" for m in METRIC_NAMES))
    for row in report.table():
        print(f"{row['scope']:<28}" + "".join(f"{row[m]:>12.5g}" for m in METRIC_NAMES))
    print(f"{'label_tv':<28}" + "".join(
        f"{d['tv']:>12.5g}" for d in true_rep.per_component))
    return EXIT_OK


def cmd_tvd(args) -> int:
    sig = read_signal_csv(args.input)
    params = TvdParams(lam=args.lam, nit=args.nit)
    y, trace = tvd_denoise(sig.values, params, return_trace=True)
    out = _prepare_file(args.out, args.force)
    write_signal_csv(out, Signal(sig.grid, y))
    RunConfig(model=ModelConfig(tvd_lambda=args.lam, tvd_nit=args.nit)).write(
        out.with_name(out.name + ".config.ini"))
    print(f"objective before: {trace[0]!r}")
    for k, val in enumerate(trace[1:], start=1):
        print(f"iteration {k}: {val!r}")
    print(f"objective after: {trace[-1]!r}")
    return EXIT_OK


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def cmd_grid(args) -> int:
    ds = read_data_dir(args.data)
    if not ds.has_split:
        raise DataIngestionError(f"{args.data}: need at least 5 examples for a train/validation split")
    if args.M is None:
        args.M = ds.n_components
    cfg = _run_config(args)
    out = _prepare_dir(args.out_dir, args.force)
    _echo_config(cfg, out / CONFIG_NAME)
    report = grid_search(ds, args.S_values, args.K_values, cfg.train, cfg.resolved_model(),
                         model_seed=cfg.train.seed)
    report.write_csv(out / "grid.csv")
    doc = {"S_values": report.S_values, "K_values": report.K_values,
           "cells": [{"S": s, "K": k, **v} for (s, k), v in report.cells.items()],
           "row_means": {str(s): v for s, v in report.row_means.items()},
           "col_means": {str(k): v for k, v in report.col_means.items()},
           "grand_mean": report.grand_mean}
    with open(out / "grid.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
    with open(out / "grid.csv", encoding="utf-8") as fh:
        print(fh.read(), end="")
    for (s, k), msg in report.errors.items():
        print(f"cell S={s} K={k} failed: {msg}", file=sys.stderr)
    return EXIT_OK


def bench_signals(n_signals: int, length: int, seed: int) -> list[Signal]:
    """Random two-tone signals with 25 dB noise on ``[0, 6]``."""
    grid = TimeGrid(0.0, 6.0, length)
    t = grid.t
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_signals):
        k = rng.uniform(5, 14)
        x = np.cos((k + 1.5) * np.pi * t + rng.uniform(0, 2 * np.pi)) + np.cos(k * np.pi * t)
        out.append(Signal(grid, add_noise_snr(x, datagen.TRAIN_SNR_DB, (seed, i))))
    return out


def cmd_bench(args) -> int:
    if args.model:
        model = load_model(args.model)
    else:
        cfg = _run_config(args)
        model = Model(cfg.resolved_model(), seed=cfg.train.seed)
    if args.length < model.config.K:
        raise UsageError(f"--length must be >= K={model.config.K}")
    signals = bench_signals(args.n_signals, args.length, args.seed)
    model.decompose(signals[0].values)  # warm-up (JIT compilation, caches)
    out = _prepare_dir(args.out_dir, args.force)
    results = _map(lambda s: _decompose_one(model, s)[1:], signals)
    rows = [(f"signal_{i:04d}", sec, err) for i, (sec, err) in enumerate(results)]
    _write_latency(out / "latency.csv", rows)
    stats = latency_stats([r[1] for r in rows])
    stats.update(length=args.length, workers=n_workers())
    with open(out / "latency_summary.json", "w", encoding="utf-8") as fh:
        json.dump(stats, fh, indent=1)
    RunConfig(model=model.config).write(out / CONFIG_NAME)
    print(_format_stats(stats))
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def _add_model_opts(p):
    p.add_argument("--config", help="INI file with [grid], [model], [train], [tvd] sections")
    p.add_argument("--variant", choices=sorted(VARIANTS))
    p.add_argument("--M", type=int, help="number of IMFs (default: from the labels)")
    p.add_argument("--S", type=int)
    p.add_argument("--K", type=int)
    p.add_argument("--tvd-lambda", type=float)
    p.add_argument("--tvd-nit", type=int)


def _add_train_opts(p):
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--eta-qtv", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="modedec", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic or windowed dataset as CSV files")
    p.add_argument("--dataset", required=True, choices=["d1", "d2", "x1", "x2", "real"])
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--families", default="A,B", help="comma-separated subset of A,B")
    p.add_argument("--limit", type=int, help="keep only the first N examples")
    p.add_argument("--n", type=int, help="samples per signal")
    p.add_argument("--config")
    p.add_argument("--series", help="real series CSV (t,value or date,value)")
    p.add_argument("--labels-dir", help="one component CSV per window, in sorted order")
    p.add_argument("--window", type=int, default=720)
    p.add_argument("--stride", type=int, default=180)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--quiet", action="store_true")
    p.add_argument("--force", action="store_true")
    _add_model_opts(p)
    _add_train_opts(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decompose", help="split a signal CSV (or a directory of them) into IMFs")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("eval", help="metric tables for a model on a labelled dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--split", choices=["auto", "val", "all"], default="auto")
    p.add_argument("--plot", action="store_true", help="also write one SVG per example")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("tvd", help="total-variation denoise a signal CSV")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lam", type=float, default=0.2)
    p.add_argument("--nit", type=int, default=20)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_tvd)

    p = sub.add_parser("grid", help="S x K hyper-parameter grid with marginal means")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--S-values", type=_int_list, default=[3, 4, 5, 6])
    p.add_argument("--K-values", type=_int_list, default=[16, 32, 48, 64])
    p.add_argument("--force", action="store_true")
    _add_model_opts(p)
    _add_train_opts(p)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("bench", help="decomposition latency over many random signals")
    p.add_argument("--model", help="checkpoint (default: a freshly initialized model)")
    p.add_argument("--n-signals", type=int, default=500)
    p.add_argument("--length", type=int, default=2048)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--force", action="store_true")
    _add_model_opts(p)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"modedec {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, SingularMatrixError, FloatingPointError) as exc:
        print(f"modedec {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataIngestionError, InvalidInputError, ModelFormatError, OSError, ValueError) as exc:
        print(f"modedec {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
