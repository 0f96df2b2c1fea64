"""Planted-model data: ratings from a known factor model, reviews from its topics."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .ingest import Interaction, dumps_interactions
from .optim import ParamSet
from .rng import stage_rng
from .topicmodel import phi_from_psi, theta_from_q

_CONSONANTS = "bdfgklmnprtv"
_VOWELS = "aiou"


def pseudo_words(n: int) -> list[str]:
    """``n`` distinct letter-only words that survive the text pipeline unchanged."""
    syllables = [c + v for c in _CONSONANTS for v in _VOWELS]
    words = ("".join(p) for p in itertools.product(syllables, repeat=2))
    out = list(itertools.islice(words, n))
    if len(out) < n:
        raise ValueError(f"at most {len(syllables) ** 2} pseudo-words available")
    return out


@dataclass
class PlantedData:
    params: ParamSet
    interactions: list[Interaction]
    words: list[str]
    noise: float

    def user_id(self, u: int) -> str:
        return f"U{u:04d}"

    def item_id(self, i: int) -> str:
        return f"I{i:04d}"

    def planted_predict(self, rows: list[Interaction]) -> np.ndarray:
        users = np.array([int(x.user_id[1:]) for x in rows], dtype=np.int64)
        items = np.array([int(x.item_id[1:]) for x in rows], dtype=np.int64)
        return self.params.predict(users, items)

    def to_jsonl(self) -> str:
        return dumps_interactions(self.interactions)


def generate_planted(
    n_users: int = 60,
    n_items: int = 40,
    K: int = 3,
    V: int = 30,
    n_ratings: int = 1500,
    noise: float = 0.3,
    words_per_review: int = 20,
    kappa: float = 2.0,
    factor_scale: float = 0.3,
    bias_scale: float = 0.3,
    seed: int = 0,
) -> PlantedData:
    """Sample a planted model and draw ratings and review text from it.

    Ratings are ``alpha + b_u + b_i + p_u . q_i + N(0, noise^2)`` over
    ``n_ratings`` distinct (user, item) pairs; pairs whose draw falls
    outside the 1-5 star range are skipped so the data stays ingestible.  Each topic owns a block of
    the vocabulary; review words are drawn topic-first from
    ``theta(q_i)`` and ``phi``.
    """
    if n_ratings > n_users * n_items:
        raise ValueError("more ratings than user-item pairs")
    rng = stage_rng(seed, "synthetic")
    b_user = rng.normal(0.0, bias_scale, n_users)
    b_item = rng.normal(0.0, bias_scale, n_items)
    P = rng.normal(0.0, factor_scale, (n_users, K))
    Q = rng.normal(0.0, 1.0, (n_items, K))
    block = np.arange(V) * K // V
    psi = np.where(block[None, :] == np.arange(K)[:, None], 2.5, 0.0) + rng.normal(0.0, 0.3, (K, V))
    params = ParamSet(3.0, b_user, b_item, P, Q, psi, kappa, K)

    pairs = rng.permutation(n_users * n_items)
    users, items = pairs // n_items, pairs % n_items
    ratings = params.predict(users, items) + rng.normal(0.0, noise, pairs.size)
    keep = np.flatnonzero((ratings >= 1.0) & (ratings <= 5.0))[:n_ratings]
    if keep.size < n_ratings:
        raise ValueError("not enough in-range ratings; lower n_ratings")
    users, items, ratings = users[keep], items[keep], ratings[keep]

    theta = theta_from_q(Q, kappa, K)
    phi = phi_from_psi(psi)
    words = pseudo_words(V)
    rows = []
    for n, (u, i, r) in enumerate(zip(users, items, ratings)):
        z = rng.choice(K, size=words_per_review, p=theta[i])
        text = " ".join(words[rng.choice(V, p=phi[k])] for k in z)
        rows.append(Interaction(f"U{u:04d}", f"I{i:04d}", float(r), text, 1_000_000 + n))
    return PlantedData(params, rows, words, noise)
