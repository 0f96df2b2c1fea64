"""PNG figures for the report command, rendered with the non-interactive backend."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import best_rows  # noqa: E402
from .pipeline import MODELS  # noqa: E402

_LABELS = {"offset": "Offset", "baseline": "Baseline", "lfm": "LFM", "ldafirst": "LDAFirst", "lda_lfm": "LDA-LFM"}


def _save(fig, path: Path) -> Path:
    # fixed metadata keeps repeated renders byte-identical
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_mse_by_model(table: Sequence[dict], path: str | Path) -> Path:
    """Grouped bars of test MSE, one group per (dataset, K, K*) row of the summary table."""
    fig, ax = plt.subplots(figsize=(max(6.0, 1.6 * len(table) + 2), 4))
    width = 0.8 / len(MODELS)
    x = np.arange(len(table))
    for j, model in enumerate(MODELS):
        values = [row.get(model) for row in table]
        heights = [np.nan if v is None else v for v in values]
        ax.bar(x + (j - (len(MODELS) - 1) / 2) * width, heights, width, label=_LABELS[model])
    ax.set_xticks(x)
    ax.set_xticklabels([f"{r['dataset']}\nK={r['K']} K*={r['K_star']}" for r in table], fontsize=8)
    ax.set_ylabel("test MSE")
    ax.legend(fontsize=8, ncol=len(MODELS))
    fig.tight_layout()
    return _save(fig, Path(path))


def plot_mse_vs_kstar(rows: Sequence[dict], path: str | Path, model: str = "lda_lfm") -> Path | None:
    """Test MSE against K* per dataset; None when fewer than two K* values exist."""
    series: dict[str, list[tuple[int, float]]] = {}
    for row in best_rows(rows):
        if row["model"] == model:
            series.setdefault(row["dataset"], []).append((int(row["K_star"]), float(row["mse_test"])))
    if not any(len({k for k, _ in pts}) > 1 for pts in series.values()):
        return None
    fig, ax = plt.subplots(figsize=(6, 4))
    for dataset in sorted(series):
        pts = sorted(series[dataset])
        ax.plot([k for k, _ in pts], [v for _, v in pts], marker="o", label=dataset)
    ax.set_xlabel("K*")
    ax.set_ylabel("test MSE")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, Path(path))


def plot_trace(trace: Sequence[dict], path: str | Path, title: str = "") -> Path:
    """Training objective and validation MSE per iteration."""
    it = [row["iteration"] for row in trace]
    fig, (left, right) = plt.subplots(1, 2, figsize=(9, 3.5))
    left.plot(it, [row["train_objective"] for row in trace])
    left.set_xlabel("iteration")
    left.set_ylabel("train objective")
    val = [row["val_mse"] for row in trace]
    if any(v is not None and v == v for v in val):
        right.plot(it, val, color="tab:orange")
    right.set_xlabel("iteration")
    right.set_ylabel("validation MSE")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    return _save(fig, Path(path))
