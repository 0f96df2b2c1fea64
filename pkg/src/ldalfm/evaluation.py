"""Model selection on validation MSE and the multi-model experiment runner."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import DEFAULT_LAMBDAS, DEFAULT_MUS, RunConfig
from .hybrid import HybridConfig
from .ingest import RatingArrays
from .lfm import FitResult, mse
from .optim import NonFiniteError
from .pipeline import GRID_MODELS, MODELS, Prepared, fit_model, prepare_file, result_checkpoint, save_prepared
from .textprep import ItemDocument

logger = logging.getLogger(__name__)

__all__ = [
    "RESULT_FIELDS",
    "ExperimentResult",
    "GridFailed",
    "GridRecord",
    "GridSpec",
    "best_rows",
    "grid_search",
    "improvement",
    "mse",
    "read_results",
    "run_experiment",
    "summary_table",
    "write_kstar_dat",
    "write_results",
]

RESULT_FIELDS = ("dataset", "model", "K", "K_star", "lambda", "mu", "seed", "mse_val", "mse_test", "wall_time_s")
# columns reproducible bit for bit; wall time is the only field that is not
DETERMINISTIC_FIELDS = RESULT_FIELDS[:-1]


@dataclass(frozen=True)
class GridSpec:
    lambdas: tuple[float, ...] = DEFAULT_LAMBDAS
    mus: tuple[float, ...] = DEFAULT_MUS

    def __post_init__(self):
        object.__setattr__(self, "lambdas", tuple(float(x) for x in self.lambdas))
        object.__setattr__(self, "mus", tuple(float(x) for x in self.mus))
        if not self.lambdas or not self.mus:
            raise ValueError("grid lists must be non-empty")
        if min(self.lambdas + self.mus) < 0:
            raise ValueError("grid values must be nonnegative")

    def cells(self) -> list[tuple[float, float]]:
        return [(lam, mu) for lam in self.lambdas for mu in self.mus]

    def __len__(self) -> int:
        return len(self.lambdas) * len(self.mus)


@dataclass
class GridRecord:
    lam: float
    mu: float
    mse_val: float = float("nan")
    error: str | None = None
    result: FitResult | None = field(default=None, repr=False)

    @property
    def ok(self) -> bool:
        return self.error is None


class GridFailed(RuntimeError):
    """Every grid cell failed; ``records`` holds each cell's error."""

    def __init__(self, records: list[GridRecord]):
        detail = "; ".join(f"lambda={r.lam:g} mu={r.mu:g}: {r.error}" for r in records)
        super().__init__(f"all {len(records)} grid configurations failed: {detail}")
        self.records = records


def grid_search(
    grid: GridSpec,
    fit: Callable[..., FitResult],
    train: RatingArrays,
    val: RatingArrays,
    docs: Sequence[ItemDocument],
    base_config: HybridConfig,
) -> tuple[GridRecord, list[GridRecord]]:
    """Fit every (lambda, mu) cell and pick the lowest validation MSE.

    ``fit(config, train, val, docs)`` is called with ``base_config`` and the
    cell's lambda and mu, so every cell shares the seed.  Ties go to the
    smaller lambda, then the smaller mu.  Cells that fail stay in the table
    with their error message.
    """
    if len(val) == 0:
        raise ValueError("grid search needs a non-empty validation set")
    records = []
    for lam, mu in grid.cells():
        rec = GridRecord(lam, mu)
        try:
            result = fit(replace(base_config, lam=lam, mu=mu), train, val, docs)
            rec.mse_val = mse(result.predict(val.users, val.items), val.ratings)
            rec.result = result
        except (NonFiniteError, FloatingPointError, ValueError) as exc:
            rec.error = str(exc)
            logger.warning("grid cell lambda=%g mu=%g failed: %s", lam, mu, exc)
        records.append(rec)
    good = [r for r in records if r.ok and np.isfinite(r.mse_val)]
    if not good:
        raise GridFailed(records)
    best = min(good, key=lambda r: (r.mse_val, r.lam, r.mu))
    return best, records


@dataclass
class ExperimentResult:
    dataset: str
    model: str
    K: int
    K_star: int
    lam: float | None
    mu: float | None
    seed: int
    mse_val: float
    mse_test: float
    wall_time_s: float
    config: dict = field(default_factory=dict)
    error: str | None = None

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"unknown model {self.model!r}")
        if self.error is None:
            for name in ("mse_val", "mse_test"):
                value = getattr(self, name)
                if not (np.isfinite(value) and value >= 0):
                    raise ValueError(f"{name} must be finite and >= 0, got {value}")

    def row(self) -> dict:
        def fmt(x):
            return "" if x is None else repr(float(x))

        return {
            "dataset": self.dataset,
            "model": self.model,
            "K": self.K,
            "K_star": self.K_star,
            "lambda": fmt(self.lam),
            "mu": fmt(self.mu),
            "seed": self.seed,
            "mse_val": fmt(self.mse_val) if self.error is None else "",
            "mse_test": fmt(self.mse_test) if self.error is None else "",
            "wall_time_s": f"{self.wall_time_s:.3f}",
        }

    def to_dict(self) -> dict:
        d = self.row()
        d.update(
            K=self.K, K_star=self.K_star, seed=self.seed, **{"lambda": self.lam, "mu": self.mu},
            mse_val=None if self.error else self.mse_val, mse_test=None if self.error else self.mse_test,
            wall_time_s=self.wall_time_s, config=self.config, error=self.error,
        )
        return d


def evaluate_model(model: str, prepared: Prepared, config: RunConfig, grid: GridSpec | None = None):
    """Fit ``model`` (grid-searched when it has hyperparameters) and score it on test.

    Returns the ExperimentResult and the winning FitResult.
    """
    split = prepared.split
    val, test = split.arrays("validation"), split.arrays("test")
    start = time.perf_counter()
    lam = mu = None
    if model in GRID_MODELS and grid is not None:
        mus = grid.mus if "mu" in GRID_MODELS[model] else (0.0,)

        def fit(cell, train, val, docs):
            return fit_model(model, prepared, config, lam=cell.lam, mu=cell.mu)

        best, _ = grid_search(
            GridSpec(grid.lambdas, mus), fit, split.arrays("train"), val, prepared.docs, config.hybrid()
        )
        result, lam = best.result, best.lam
        mu = best.mu if "mu" in GRID_MODELS[model] else None
    else:
        if model in GRID_MODELS:
            lam = config.lam
            mu = config.mu if "mu" in GRID_MODELS[model] else None
        result = fit_model(model, prepared, config)
    elapsed = time.perf_counter() - start

    def score(part):
        pred = result.predict(part.users, part.items)
        return mse(np.clip(pred, 1.0, 5.0) if config.clip else pred, part.ratings)

    out = ExperimentResult(
        prepared.name, model, config.K, config.K_star, lam, mu, config.seed,
        score(val), score(test), elapsed, config.to_dict(),
    )
    return out, result


def run_experiment(
    dataset: str | Path | Prepared,
    models: Sequence[str],
    config: RunConfig,
    out_dir: str | Path,
    grid: GridSpec | None = None,
) -> list[ExperimentResult]:
    """ingest -> preprocess -> split -> fit each model -> score on test -> persist.

    ``dataset`` is a raw review file or an already prepared dataset.  A
    failing model gets a row with its error and the run carries on.
    Writes ``results.csv``, ``results.json`` and one checkpoint per model.
    """
    unknown = [m for m in models if m not in MODELS]
    if unknown:
        raise ValueError(f"unknown model(s) {', '.join(unknown)}; expected one of {', '.join(MODELS)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if isinstance(dataset, Prepared):
        prepared = dataset
    else:
        prepared = prepare_file(dataset, config)
        save_prepared(prepared, out_dir / "prepared")
    results = []
    for model in models:
        logger.info("fitting %s on %s", model, prepared.name)
        try:
            res, fitted = evaluate_model(model, prepared, config, grid)
        except (NonFiniteError, FloatingPointError, ValueError, GridFailed) as exc:
            logger.error("%s failed: %s", model, exc)
            res = ExperimentResult(
                prepared.name, model, config.K, config.K_star, None, None, config.seed,
                float("nan"), float("nan"), 0.0, config.to_dict(), error=str(exc),
            )
            results.append(res)
            continue
        extra = {"selected": {"lambda": res.lam, "mu": res.mu}}
        ckpt = result_checkpoint(fitted, prepared, extra)
        (out_dir / f"checkpoint_{model}.json").write_text(json.dumps(ckpt), encoding="utf-8")
        results.append(res)
    write_results(results, out_dir)
    return results


def results_csv(results: Sequence[ExperimentResult]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=RESULT_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in results:
        writer.writerow(r.row())
    return buf.getvalue()


def write_results(results: Sequence[ExperimentResult], out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    (out_dir / "results.csv").write_text(results_csv(results), encoding="utf-8")
    payload = [r.to_dict() for r in results]
    (out_dir / "results.json").write_text(json.dumps(payload, indent=1, sort_keys=True), encoding="utf-8")


def read_results(path: str | Path) -> list[dict]:
    """Rows of a results CSV, checking the header."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != RESULT_FIELDS:
            raise ValueError(f"{path}: not a results table (header {reader.fieldnames})")
        return list(reader)


def improvement(mse_ref: float, mse_model: float) -> float:
    """Percentage decrease of ``mse_model`` relative to ``mse_ref``."""
    if mse_ref <= 0:
        raise ValueError("reference MSE must be positive")
    return (mse_ref - mse_model) / mse_ref * 100.0


def best_rows(rows: Sequence[dict]) -> list[dict]:
    """Keep one row per (dataset, model, K, K_star): the lowest validation MSE."""
    best: dict[tuple, dict] = {}
    for row in rows:
        if not row["mse_test"]:
            continue
        key = (row["dataset"], row["model"], int(row["K"]), int(row["K_star"]))
        val = float(row["mse_val"]) if row["mse_val"] else float("inf")
        if key not in best or val < float(best[key]["mse_val"] or "inf"):
            best[key] = row
    return [best[k] for k in sorted(best)]


def summary_table(rows: Sequence[dict]) -> list[dict]:
    """One row per (dataset, K, K_star): test MSE per model plus the two Imp columns.

    ``imp_lfm`` compares LDA-LFM against LFM, ``imp_ldafirst`` against
    LDAFirst.  Missing or failed models leave blanks; repeated models are
    resolved by :func:`best_rows`.
    """
    table: dict[tuple, dict] = {}
    for row in best_rows(rows):
        key = (row["dataset"], int(row["K"]), int(row["K_star"]))
        table.setdefault(key, {})[row["model"]] = float(row["mse_test"]) if row["mse_test"] else None
    out = []
    for (dataset, K, K_star), values in sorted(table.items()):
        line = {"dataset": dataset, "K": K, "K_star": K_star}
        line.update({m: values.get(m) for m in MODELS})
        for ref, name in (("lfm", "imp_lfm"), ("ldafirst", "imp_ldafirst")):
            a, b = values.get(ref), values.get("lda_lfm")
            line[name] = improvement(a, b) if a and b is not None else None
        out.append(line)
    return out


def write_kstar_dat(rows: Sequence[dict], path: str | Path, model: str = "lda_lfm") -> int:
    """Whitespace-separated ``K_star mse_test`` blocks per dataset, for gnuplot.

    Returns the number of points written.
    """
    by_dataset: dict[str, list[tuple[int, float]]] = {}
    for row in best_rows(rows):
        if row["model"] == model:
            by_dataset.setdefault(row["dataset"], []).append((int(row["K_star"]), float(row["mse_test"])))
    lines, n = [], 0
    for dataset in sorted(by_dataset):
        lines.append(f"# dataset {dataset}")
        lines.append("# K_star mse_test")
        for k, v in sorted(by_dataset[dataset]):
            lines.append(f"{k} {v!r}")
            n += 1
        lines += ["", ""]
    Path(path).write_text("\n".join(lines), encoding="utf-8")
    return n
