"""Rating-only models: Offset, Baseline Rating and the latent factor model."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ingest import RatingArrays
from .optim import SIGMA_INIT, AdamState, NonFiniteError, ParamSet, adam_step, init_params

DIVERGENCE_LIMIT = 1e12
TRACE_FIELDS = ("iteration", "train_objective", "val_mse")


class TrainingDiverged(NonFiniteError):
    pass


@dataclass
class RatingStats:
    alpha: float
    r_bar_user: np.ndarray
    r_bar_item: np.ndarray


def rating_stats(train: RatingArrays, n_users: int, n_items: int) -> RatingStats:
    """Global mean and mean per-user/per-item deviations from it."""
    if len(train) == 0:
        raise ValueError("empty training set")
    alpha = float(train.ratings.mean())
    dev = train.ratings - alpha

    def mean_dev(idx, n):
        total = np.bincount(idx, weights=dev, minlength=n)
        count = np.bincount(idx, minlength=n)
        return np.divide(total, count, out=np.zeros(n), where=count > 0)

    return RatingStats(alpha, mean_dev(train.users, n_users), mean_dev(train.items, n_items))


def offset_predict(stats: RatingStats) -> float:
    return stats.alpha


def baseline_predict(stats: RatingStats, u, i):
    u = np.asarray(u)
    i = np.asarray(i)
    if np.any(u < 0) or np.any(u >= len(stats.r_bar_user)):
        raise IndexError("user id out of range")
    if np.any(i < 0) or np.any(i >= len(stats.r_bar_item)):
        raise IndexError("item id out of range")
    return stats.alpha + stats.r_bar_user[u] + stats.r_bar_item[i]


@dataclass
class OffsetModel:
    stats: RatingStats
    name: str = "offset"

    def predict(self, users, items) -> np.ndarray:
        return np.full(len(users), offset_predict(self.stats))


@dataclass
class BaselineModel:
    stats: RatingStats
    name: str = "baseline"

    def predict(self, users, items) -> np.ndarray:
        return baseline_predict(self.stats, users, items)


def predict_rating(params: ParamSet, u: int, i: int) -> float:
    return float(params.predict(np.array([u]), np.array([i]))[0])


def _scatter_rows(idx: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((n, values.shape[1]))
    np.add.at(out, idx, values)
    return out


def rating_loss_and_grad(
    params: ParamSet,
    data: RatingArrays,
    lam: float,
    scale: float = 1.0,
    q_reg_cols: slice | None = slice(None),
) -> tuple[float, ParamSet]:
    """``scale * SSE + lam * (|P|^2 + |b_u|^2 + |b_i|^2 + |Q[:, q_reg_cols]|^2)`` and its gradient.

    ``q_reg_cols=None`` leaves Q unregularized.  psi and kappa get zero
    gradient.
    """
    users, items = data.users, data.items
    err = data.ratings - params.predict(users, items)
    loss = scale * float(err @ err)
    loss += lam * (float(np.sum(params.P**2)) + float(params.b_user @ params.b_user) + float(params.b_item @ params.b_item))

    coef = -2.0 * scale * err
    grad = params.zeros_like()
    grad.alpha = float(coef.sum())
    grad.b_user = np.bincount(users, weights=coef, minlength=params.n_users) + 2.0 * lam * params.b_user
    grad.b_item = np.bincount(items, weights=coef, minlength=params.n_items) + 2.0 * lam * params.b_item
    grad.P = _scatter_rows(users, coef[:, None] * params.Q[items], params.n_users) + 2.0 * lam * params.P
    grad.Q = _scatter_rows(items, coef[:, None] * params.P[users], params.n_items)
    if q_reg_cols is not None:
        Qr = params.Q[:, q_reg_cols]
        loss += lam * float(np.sum(Qr**2))
        grad.Q[:, q_reg_cols] += 2.0 * lam * Qr
    return loss, grad


def lfm_objective(
    params: ParamSet, train: RatingArrays, lam: float, include_q_norm: bool = True, normalize: bool = True
) -> float:
    """Mean squared training error plus ``lam`` times the squared norms of P, Q, b_u, b_i.

    ``include_q_norm`` and ``normalize`` exist only so the joint model with
    its topic term switched off can be reproduced exactly.
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if len(train) == 0:
        raise ValueError("empty training set")
    scale = 1.0 / len(train) if normalize else 1.0
    return rating_loss_and_grad(params, train, lam, scale, slice(None) if include_q_norm else None)[0]


def mse(predictions, truths) -> float:
    predictions = np.asarray(predictions, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    if predictions.shape != truths.shape:
        raise ValueError(f"length mismatch: {predictions.shape} vs {truths.shape}")
    if predictions.size == 0:
        raise ValueError("mse of an empty set")
    diff = predictions - truths
    return float(diff @ diff) / diff.size


@dataclass
class FitResult:
    """A trained factor model with its per-iteration trace."""

    name: str
    params: ParamSet
    trace: list[dict] = field(default_factory=list)
    topic_state: object | None = None
    seed: int | None = None
    phi: np.ndarray | None = None

    def predict(self, users, items) -> np.ndarray:
        return self.params.predict(users, items)


def check_objective(value: float, iteration: int) -> None:
    if not np.isfinite(value) or value > DIVERGENCE_LIMIT:
        raise TrainingDiverged(f"objective diverged ({value!r}) at iteration {iteration}", iteration=iteration)


def fit_lfm(
    train: RatingArrays,
    val: RatingArrays | None,
    n_users: int,
    n_items: int,
    K: int,
    K_star: int = 0,
    lam: float = 0.0,
    n_iter: int = 35,
    seed: int = 0,
    lr: float = 0.01,
    include_q_norm: bool = True,
    normalize: bool = True,
    V: int = 1,
    sigma_init: float = SIGMA_INIT,
) -> FitResult:
    """Full-batch Adam on :func:`lfm_objective`; returns the last iterate."""
    if n_iter < 1:
        raise ValueError("n_iter must be >= 1")
    scale = 1.0 / len(train) if normalize else 1.0
    q_cols = slice(None) if include_q_norm else None
    params = init_params(n_users, n_items, train.ratings, K, K_star, V, seed, sigma_init)
    state = AdamState.fresh(params, lr=lr)
    trace = []
    for it in range(1, n_iter + 1):
        loss, grad = rating_loss_and_grad(params, train, lam, scale, q_cols)
        check_objective(loss, it)
        try:
            params, state = adam_step(params, grad, state, frozen=("psi", "kappa"))
        except NonFiniteError as exc:
            raise TrainingDiverged(f"{exc} at iteration {it}", block=exc.block, iteration=it) from exc
        obj = rating_loss_and_grad(params, train, lam, scale, q_cols)[0]
        check_objective(obj, it)
        trace.append(_trace_row(it, obj, params, val))
    return FitResult("lfm", params, trace, seed=seed)


def _trace_row(it: int, objective: float, model, val: RatingArrays | None) -> dict:
    val_mse = mse(model.predict(val.users, val.items), val.ratings) if val is not None and len(val) else float("nan")
    return {"iteration": it, "train_objective": objective, "val_mse": val_mse}


def write_trace_csv(trace: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRACE_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in trace:
            writer.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in TRACE_FIELDS})
