"""Command line: prepare, train, evaluate, gridsearch, experiment and report.

Every command writes ``manifest.json`` (command, config file, fully resolved
configuration, inputs, outputs, version, seed) plus ``config.ini`` into its
output directory; ``--config out/config.ini`` replays the run.  The log level
is read from ``LDALFM_LOG_LEVEL`` (default WARNING).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import SECTION, RunConfig, load_config
from .evaluation import (
    RESULT_FIELDS,
    ExperimentResult,
    GridFailed,
    GridSpec,
    grid_search,
    read_results,
    results_csv,
    run_experiment,
    summary_table,
    write_kstar_dat,
    write_results,
)
from .ingest import IngestError, LineError
from .lfm import TrainingDiverged, mse, write_trace_csv
from .optim import NonFiniteError
from .pipeline import (
    GRID_MODELS,
    MODELS,
    IncompatibleCheckpoint,
    Prepared,
    check_compatible,
    fit_model,
    load_prepared,
    prepare_file,
    result_checkpoint,
    save_prepared,
)
from .topicmodel import write_topic_dump

logger = logging.getLogger("ldalfm")

LOG_ENV = "LDALFM_LOG_LEVEL"
MANIFEST_FILE = "manifest.json"
CONFIG_FILE = "config.ini"
TIMING_FILE = "timing.json"


class CliError(Exception):
    """A user-facing failure; the message is printed and the exit code is 1."""


def positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def nonneg_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def nonneg_float(text: str) -> float:
    value = float(text)
    if not value >= 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return value


def positive_float(text: str) -> float:
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
    return value


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} not found: {p}")
    return p


def _resolve_config(args) -> RunConfig:
    if args.config is not None:
        _existing(args.config, "config file")
    overrides = dict(
        seed=args.seed, k_core=getattr(args, "k_core", None), vocab_size=getattr(args, "vocab_size", None),
        K=getattr(args, "K", None), K_star=getattr(args, "K_star", None), lam=getattr(args, "lam", None),
        mu=getattr(args, "mu", None), n_iter=getattr(args, "iters", None), lr=getattr(args, "lr", None),
        clip=True if getattr(args, "clip", False) else None,
    )
    try:
        return load_config(args.config, **overrides)
    except ValueError as exc:
        raise CliError(str(exc)) from exc


def _config_ini(config: RunConfig) -> str:
    lines = [f"[{SECTION}]"]
    for key, value in config.to_dict().items():
        if isinstance(value, list):
            value = ", ".join(repr(float(v)) for v in value)
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def write_manifest(out_dir: Path, args, config: RunConfig, inputs: dict, extra: dict | None = None) -> None:
    """manifest.json + config.ini; output paths are listed relative to ``out_dir``."""
    (out_dir / CONFIG_FILE).write_text(_config_ini(config), encoding="utf-8")
    outputs = sorted(
        str(p.relative_to(out_dir)) for p in out_dir.rglob("*") if p.is_file() and p.name != MANIFEST_FILE
    )
    manifest = {
        "command": args.command,
        "config_file": args.config,
        "config": config.to_dict(),
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": outputs + [MANIFEST_FILE],
        "version": __version__,
        "seed": config.seed,
    }
    if extra:
        manifest.update(extra)
    (out_dir / MANIFEST_FILE).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _load_prepared(path: str) -> Prepared:
    _existing(path, "prepared dataset directory")
    try:
        return load_prepared(path)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(f"cannot load prepared dataset {path}: {exc}") from exc


def _predict(params, users, items, clip: bool) -> np.ndarray:
    pred = params.predict(users, items)
    return np.clip(pred, 1.0, 5.0) if clip else pred


def _emit(args, payload, text: str) -> None:
    if args.json:
        print(json.dumps(payload, indent=1, sort_keys=True))
    else:
        print(text, end="" if text.endswith("\n") else "\n")


# ---- commands ----


def cmd_prepare(args) -> None:
    src = _existing(args.input, "input file")
    config = _resolve_config(args)
    errors: list[LineError] = []
    try:
        prepared = prepare_file(src, config, errors)
    except (IngestError, ValueError, OSError) as exc:
        raise CliError(f"{src}: {exc}") from exc
    out = _out_dir(args.out)
    save_prepared(prepared, out)
    if errors:
        with open(out / "rejected.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["line", "message"])
            writer.writerows((e.line, e.message) for e in errors)
    counts = prepared.split.counts()
    write_manifest(out, args, config, {"input": src}, {"V": prepared.V, "counts": counts, "rejected_lines": len(errors)})
    summary = {"dataset": prepared.name, "V": prepared.V, **counts, "rejected_lines": len(errors)}
    _emit(args, summary, " ".join(f"{k}={v}" for k, v in summary.items()))


def _train_one(model: str, prepared: Prepared, config: RunConfig):
    try:
        return fit_model(model, prepared, config)
    except TrainingDiverged as exc:
        raise CliError(f"training diverged at iteration {exc.iteration}: {exc}") from exc
    except NonFiniteError as exc:
        raise CliError(str(exc)) from exc


def _hyper(model: str, config: RunConfig, lam=None, mu=None) -> dict:
    lam = config.lam if lam is None else lam
    mu = config.mu if mu is None else mu
    return {
        "lambda": lam if model in GRID_MODELS else None,
        "mu": mu if model in GRID_MODELS and "mu" in GRID_MODELS[model] else None,
        "run_K": config.K,
        "run_K_star": config.K_star,
    }


def _save_fit(out: Path, result, prepared: Prepared, model: str, hyper: dict, elapsed: float) -> None:
    ckpt = result_checkpoint(result, prepared, hyper)
    (out / "checkpoint.json").write_text(json.dumps(ckpt), encoding="utf-8")
    write_trace_csv(result.trace, out / "trace.csv")
    if result.phi is not None and model in ("ldafirst", "lda_lfm"):
        write_topic_dump(result.phi, prepared.vocab, out / "topics.csv")
    (out / TIMING_FILE).write_text(json.dumps({"wall_time_s": round(elapsed, 3)}) + "\n", encoding="utf-8")


def cmd_train(args) -> None:
    prepared = _load_prepared(args.prepared)
    config = _resolve_config(args)
    out = _out_dir(args.out)
    start = time.perf_counter()
    result = _train_one(args.model, prepared, config)
    elapsed = time.perf_counter() - start
    _save_fit(out, result, prepared, args.model, _hyper(args.model, config), elapsed)
    write_manifest(out, args, config, {"prepared": args.prepared}, {"model": args.model, "V": prepared.V})
    last = result.trace[-1] if result.trace else {}
    summary = {"model": args.model, "K": result.params.K, "K_star": result.params.K_star,
               "iterations": len(result.trace), "val_mse": last.get("val_mse"), "wall_time_s": round(elapsed, 3)}
    _emit(args, summary, " ".join(f"{k}={v}" for k, v in summary.items()))


def cmd_evaluate(args) -> None:
    ckpt_path = _existing(args.checkpoint, "checkpoint")
    prepared = _load_prepared(args.prepared)
    config = _resolve_config(args)
    try:
        payload = json.loads(ckpt_path.read_text(encoding="utf-8"))
        params = check_compatible(payload, prepared)
    except IncompatibleCheckpoint as exc:
        raise CliError(f"{ckpt_path}: {exc}") from exc
    except (ValueError, KeyError) as exc:
        raise CliError(f"{ckpt_path}: unreadable checkpoint: {exc}") from exc
    split = prepared.split
    val, test = split.arrays("validation"), split.arrays("test")
    if len(test) == 0:
        raise CliError(f"{args.prepared}: empty test split")
    timing = ckpt_path.parent / TIMING_FILE
    wall = json.loads(timing.read_text())["wall_time_s"] if timing.exists() else 0.0
    model = payload.get("model")
    result = ExperimentResult(
        prepared.name, model, payload.get("run_K", params.K), payload.get("run_K_star", params.K_star),
        payload.get("lambda"), payload.get("mu"), payload.get("seed", config.seed),
        mse(_predict(params, val.users, val.items, config.clip), val.ratings) if len(val) else 0.0,
        mse(_predict(params, test.users, test.items, config.clip), test.ratings),
        wall,
    )
    if args.out:
        out = _out_dir(args.out)
        write_results([result], out)
        write_manifest(out, args, config, {"checkpoint": ckpt_path, "prepared": args.prepared})
    report = {k: result.to_dict()[k] for k in RESULT_FIELDS}
    report["clipped"] = config.clip
    _emit(args, report, results_csv([result]))


def cmd_gridsearch(args) -> None:
    prepared = _load_prepared(args.prepared)
    config = _resolve_config(args)
    if args.model not in GRID_MODELS:
        raise CliError(f"model {args.model!r} has no hyperparameters to search; choose one of {', '.join(GRID_MODELS)}")
    out = _out_dir(args.out)
    split = prepared.split
    train, val, test = split.arrays("train"), split.arrays("validation"), split.arrays("test")
    mus = config.mus if "mu" in GRID_MODELS[args.model] else (0.0,)
    grid = GridSpec(config.lambdas, mus)

    def fit(cell, train, val, docs):
        return fit_model(args.model, prepared, config, lam=cell.lam, mu=cell.mu)

    start = time.perf_counter()
    try:
        best, records = grid_search(grid, fit, train, val, prepared.docs, config.hybrid())
    except GridFailed as exc:
        raise CliError(str(exc)) from exc
    elapsed = time.perf_counter() - start
    with open(out / "grid.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["lambda", "mu", "mse_val", "selected", "error"])
        for r in records:
            writer.writerow([repr(r.lam), repr(r.mu), repr(r.mse_val) if r.ok else "", int(r is best), r.error or ""])
    hyper = _hyper(args.model, config, best.lam, best.mu)
    _save_fit(out, best.result, prepared, args.model, hyper, elapsed)
    params = best.result.params
    result = ExperimentResult(
        prepared.name, args.model, config.K, config.K_star, hyper["lambda"], hyper["mu"], config.seed,
        best.mse_val, mse(_predict(params, test.users, test.items, config.clip), test.ratings), elapsed,
        config.to_dict(),
    )
    write_results([result], out)
    write_manifest(out, args, config, {"prepared": args.prepared}, {"model": args.model, "V": prepared.V})
    payload = {"cells": len(records), "best": {"lambda": best.lam, "mu": hyper["mu"], "mse_val": best.mse_val},
               "mse_test": result.mse_test}
    _emit(args, payload, (out / "grid.csv").read_text(encoding="utf-8"))


def cmd_experiment(args) -> None:
    src = _existing(args.input, "input")
    config = _resolve_config(args)
    models = [m.strip() for m in args.models.split(",") if m.strip()]
    bad = [m for m in models if m not in MODELS]
    if not models or bad:
        raise CliError(f"unknown model(s) {', '.join(bad) or '(none)'}; expected one of {', '.join(MODELS)}")
    out = _out_dir(args.out)
    dataset = _load_prepared(str(src)) if src.is_dir() else src
    grid = None if args.no_grid else GridSpec(config.lambdas, config.mus)
    try:
        results = run_experiment(dataset, models, config, out, grid)
    except (IngestError, OSError) as exc:
        raise CliError(f"{src}: {exc}") from exc
    write_manifest(out, args, config, {"input": src}, {"models": models, "grid_search": grid is not None})
    _emit(args, [r.to_dict() for r in results], results_csv(results))
    failed = [r for r in results if r.error]
    if failed:
        raise CliError("model(s) failed: " + "; ".join(f"{r.model}: {r.error}" for r in failed))


def _collect_results(paths: list[str]) -> list[tuple[Path, list[dict]]]:
    found = []
    for raw in paths:
        p = _existing(raw, "results path")
        files = sorted(p.rglob("results.csv")) if p.is_dir() else [p]
        for f in files:
            try:
                rows = read_results(f)
            except (ValueError, OSError) as exc:
                raise CliError(str(exc)) from exc
            if rows:
                found.append((f, rows))
    return found


def _model_order(row: dict) -> tuple:
    rank = MODELS.index(row["model"]) if row["model"] in MODELS else len(MODELS)
    return (row["dataset"], rank, row["model"], int(row["K"]), int(row["K_star"]), int(row["seed"]))


def cmd_report(args) -> None:
    from .plotting import plot_mse_by_model, plot_mse_vs_kstar, plot_trace

    found = _collect_results(args.results)
    if not found:
        raise CliError(f"no result rows found under: {', '.join(args.results)}")
    rows = sorted((row for _, rs in found for row in rs), key=_model_order)
    out = _out_dir(args.out)
    with open(out / "report.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    table = summary_table(rows)
    columns = ["dataset", "K", "K_star", *MODELS, "imp_lfm", "imp_ldafirst"]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for line in table:
        writer.writerow({k: "" if line[k] is None else (f"{line[k]:.6g}" if isinstance(line[k], float) else line[k])
                         for k in columns})
    (out / "summary.csv").write_text(buf.getvalue(), encoding="utf-8")
    write_kstar_dat(rows, out / "mse_vs_kstar.dat")
    figures = [plot_mse_by_model(table, out / "mse_by_model.png")]
    kstar = plot_mse_vs_kstar(rows, out / "mse_vs_kstar.png")
    if kstar is not None:
        figures.append(kstar)
    for f, rs in found:
        trace = f.parent / "trace.csv"
        if trace.exists():
            with open(trace, newline="", encoding="utf-8") as fh:
                points = [{"iteration": int(r["iteration"]), "train_objective": float(r["train_objective"]),
                           "val_mse": float(r["val_mse"])} for r in csv.DictReader(fh)]
            if points:
                name = f"trace_{rs[0]['dataset']}_{rs[0]['model']}.png"
                figures.append(plot_trace(points, out / name, f"{rs[0]['dataset']} / {rs[0]['model']}"))
    config = _resolve_config(args)
    write_manifest(out, args, config, {f"results_{n}": f for n, (f, _) in enumerate(found)})
    _emit(args, {"rows": rows, "summary": table, "figures": [p.name for p in figures]}, buf.getvalue())


# ---- argument parsing ----


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file with an [ldalfm] section; flags override it")
    p.add_argument("--seed", type=nonneg_int, help="top-level RNG seed")
    p.add_argument("--json", action="store_true", help="print a machine-readable report")


def _data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--k-core", dest="k_core", type=positive_int, help="minimum interactions per user and item")
    p.add_argument("--vocab-size", dest="vocab_size", type=positive_int, help="vocabulary size V")


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--K", dest="K", type=positive_int, help="number of topics / topic-linked factors")
    p.add_argument("--K-star", dest="K_star", type=nonneg_int, help="extra latent factors outside the topic model")
    p.add_argument("--lambda", dest="lam", type=nonneg_float, help="L2 regularisation weight")
    p.add_argument("--mu", dest="mu", type=nonneg_float, help="weight of the corpus log-likelihood")
    p.add_argument("--iters", dest="iters", type=positive_int, help="training iterations")
    p.add_argument("--lr", dest="lr", type=positive_float, help="Adam learning rate")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ldalfm", description="LDA-LFM review-aware rating prediction")
    parser.add_argument("--version", action="version", version=f"ldalfm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="ingest, filter, split and build item documents")
    p.add_argument("input", help="JSON-lines reviews file (optionally .gz)")
    p.add_argument("--out", required=True, help="output directory")
    _common(p)
    _data_flags(p)

    p = sub.add_parser("train", help="fit one model on a prepared dataset")
    p.add_argument("prepared", help="directory written by 'prepare'")
    p.add_argument("--model", choices=MODELS, default="lda_lfm")
    p.add_argument("--out", required=True, help="output directory")
    _common(p)
    _model_flags(p)

    p = sub.add_parser("evaluate", help="test MSE of a checkpoint")
    p.add_argument("checkpoint", help="checkpoint.json written by 'train' or 'gridsearch'")
    p.add_argument("prepared", help="directory written by 'prepare'")
    p.add_argument("--out", help="also write results.csv/json here")
    p.add_argument("--clip", action="store_true", help="clip predictions to the 1-5 star range")
    _common(p)

    p = sub.add_parser("gridsearch", help="select (lambda, mu) on validation MSE")
    p.add_argument("prepared", help="directory written by 'prepare'")
    p.add_argument("--model", choices=tuple(GRID_MODELS), default="lda_lfm")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--clip", action="store_true", help="clip predictions to the 1-5 star range when scoring")
    _common(p)
    _model_flags(p)

    p = sub.add_parser("experiment", help="prepare (if needed), fit and score several models")
    p.add_argument("input", help="raw reviews file or prepared directory")
    p.add_argument("--models", default=",".join(MODELS), help="comma-separated model names")
    p.add_argument("--no-grid", action="store_true", help="use the configured lambda/mu instead of grid search")
    p.add_argument("--out", required=True, help="output directory")
    _common(p)
    _data_flags(p)
    _model_flags(p)

    p = sub.add_parser("report", help="merge results tables and render figures")
    p.add_argument("results", nargs="+", help="results.csv files or directories containing them")
    p.add_argument("--out", required=True, help="output directory")
    _common(p)
    return parser


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "gridsearch": cmd_gridsearch,
    "experiment": cmd_experiment,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except CliError as exc:
        print(f"ldalfm {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"ldalfm {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
