"""Prepared-dataset layout and model dispatch shared by the CLI and the experiment runner."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .hybrid import fit_lda_lfm, fit_ldafirst
from .ingest import DatasetSplit, LineError, deduplicate, k_core_filter, load_split, read_reviews, save_split, split_dataset
from .lfm import BaselineModel, FitResult, OffsetModel, fit_lfm, rating_stats
from .optim import ParamSet, checkpoint_dict, params_from_checkpoint
from .textprep import (
    ItemDocument,
    Vocabulary,
    aggregate_item_documents,
    build_vocabulary,
    load_corpus,
    save_corpus,
    tokenize_reviews,
)
from .topicmodel import TopicState

logger = logging.getLogger(__name__)

MODELS = ("offset", "baseline", "lfm", "ldafirst", "lda_lfm")
GRID_MODELS = {"lfm": ("lambda",), "ldafirst": ("lambda",), "lda_lfm": ("lambda", "mu")}


@dataclass
class Prepared:
    split: DatasetSplit
    vocab: Vocabulary
    docs: list[ItemDocument]
    name: str = "dataset"

    @property
    def V(self) -> int:
        return max(len(self.vocab), 1)

    def fingerprint(self) -> dict:
        return {
            "dataset": self.name,
            "n_users": self.split.n_users,
            "n_items": self.split.n_items,
            "V": self.V,
            "vocab_sha256": self.vocab.sha256(),
        }


def prepare_interactions(rows, config: RunConfig, name: str = "dataset") -> Prepared:
    """dedupe -> k-core -> split -> clean text -> vocabulary -> item documents."""
    rows = k_core_filter(deduplicate(rows), config.k_core)
    if len(rows) < 10:
        raise ValueError(f"only {len(rows)} interactions left after {config.k_core}-core filtering")
    logger.info("%d interactions after %d-core filtering", len(rows), config.k_core)
    split = split_dataset(rows, config.seed)
    tokens = tokenize_reviews(split.train)
    vocab = build_vocabulary(tokens, config.vocab_size)
    docs = aggregate_item_documents(split.train, vocab, split.item_index, tokens)
    return Prepared(split, vocab, docs, name)


def prepare_file(path: str | Path, config: RunConfig, errors: list[LineError] | None = None) -> Prepared:
    path = Path(path)
    name = path.name.split(".")[0]
    return prepare_interactions(read_reviews(path, errors), config, name)


def save_prepared(prepared: Prepared, out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    save_split(prepared.split, out_dir)
    save_corpus(prepared.vocab, prepared.docs, out_dir)
    (out_dir / "dataset.json").write_text(json.dumps(prepared.fingerprint(), indent=1, sort_keys=True), encoding="utf-8")


def load_prepared(in_dir: str | Path) -> Prepared:
    in_dir = Path(in_dir)
    if not (in_dir / "index.json").exists():
        raise FileNotFoundError(f"{in_dir} is not a prepared dataset directory (no index.json)")
    split = load_split(in_dir)
    vocab, docs = load_corpus(in_dir)
    meta_path = in_dir / "dataset.json"
    name = json.loads(meta_path.read_text())["dataset"] if meta_path.exists() else in_dir.name
    return Prepared(split, vocab, docs, name)


def constant_params(prepared: Prepared, alpha: float, b_user=None, b_item=None) -> ParamSet:
    """Offset/Baseline models expressed as a factor model with zero factors."""
    n_u, n_i = prepared.split.n_users, prepared.split.n_items
    return ParamSet(
        float(alpha),
        np.zeros(n_u) if b_user is None else np.asarray(b_user, dtype=np.float64),
        np.zeros(n_i) if b_item is None else np.asarray(b_item, dtype=np.float64),
        np.zeros((n_u, 1)),
        np.zeros((n_i, 1)),
        np.zeros((1, prepared.V)),
        1.0,
        1,
    )


def fit_model(name: str, prepared: Prepared, config: RunConfig, lam: float | None = None, mu: float | None = None):
    """Train ``name`` on the prepared train split; returns a FitResult."""
    split = prepared.split
    train, val = split.arrays("train"), split.arrays("validation")
    lam = config.lam if lam is None else lam
    mu = config.mu if mu is None else mu
    n_u, n_i = split.n_users, split.n_items
    if name == "offset":
        model = OffsetModel(rating_stats(train, n_u, n_i))
        return FitResult("offset", constant_params(prepared, model.stats.alpha), seed=config.seed)
    if name == "baseline":
        stats = rating_stats(train, n_u, n_i)
        return FitResult("baseline", constant_params(prepared, stats.alpha, stats.r_bar_user, stats.r_bar_item), seed=config.seed)
    if name == "lfm":
        result = fit_lfm(
            train, val, n_u, n_i, config.K, config.K_star, lam, config.n_iter, config.seed, config.lr,
            V=prepared.V, sigma_init=config.sigma_init,
        )
        return result
    hybrid = config.hybrid(lam=lam, mu=mu)
    if name == "ldafirst":
        return fit_ldafirst(hybrid, train, val, prepared.docs, n_u, n_i, prepared.V)
    if name == "lda_lfm":
        return fit_lda_lfm(hybrid, train, val, prepared.docs, n_u, n_i, prepared.V)
    raise ValueError(f"unknown model {name!r}; expected one of {', '.join(MODELS)}")


def result_checkpoint(result: FitResult, prepared: Prepared, extra: dict | None = None) -> dict:
    payload = {"dataset": prepared.fingerprint()}
    if isinstance(result.topic_state, TopicState):
        payload["topic_state"] = result.topic_state.to_lists()
    if extra:
        payload.update(extra)
    return checkpoint_dict(result.params, result.name, result.seed, payload)


class IncompatibleCheckpoint(ValueError):
    pass


def check_compatible(payload: dict, prepared: Prepared) -> ParamSet:
    """Load checkpoint params, refusing data prepared with a different index or vocabulary."""
    params = params_from_checkpoint(payload)
    ours = prepared.fingerprint()
    theirs = payload.get("dataset", {})
    problems = [
        f"{key}: checkpoint {theirs.get(key)!r} vs data {ours[key]!r}"
        for key in ("n_users", "n_items", "V", "vocab_sha256")
        if theirs.get(key) != ours[key]
    ]
    if problems:
        raise IncompatibleCheckpoint(
            f"checkpoint (K={params.K}, K*={params.K_star}, V={params.V}) does not match prepared data "
            f"(V={ours['V']}): " + "; ".join(problems)
        )
    return params
