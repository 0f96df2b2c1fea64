from pathlib import Path

import numpy as np
import pytest

from ldalfm.ingest import Interaction, RatingArrays
from ldalfm.optim import ParamSet
from ldalfm.textprep import ItemDocument
from ldalfm.topicmodel import TopicState

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def tiny_reviews() -> Path:
    return FIXTURES / "tiny_reviews.jsonl"


def random_instance(rng, n_users=4, n_items=3, K=2, K_star=0, V=5, n_ratings=8, doc_len=(0, 6)):
    """A small random (params, ratings, docs, topic state) tuple for gradient checks."""
    width = K + K_star
    params = ParamSet(
        float(rng.normal(3.0, 0.5)),
        rng.normal(0, 0.5, n_users),
        rng.normal(0, 0.5, n_items),
        rng.normal(0, 0.5, (n_users, width)),
        rng.normal(0, 0.5, (n_items, width)),
        rng.normal(0, 0.5, (K, V)),
        float(rng.uniform(0.5, 2.0)),
        K,
    )
    ratings = RatingArrays(
        rng.integers(0, n_users, n_ratings),
        rng.integers(0, n_items, n_ratings),
        rng.integers(1, 6, n_ratings).astype(float),
    )
    docs = [ItemDocument(i, rng.integers(0, V, rng.integers(*doc_len) if doc_len[1] > doc_len[0] else doc_len[0]), 1)
            for i in range(n_items)]
    state = TopicState([rng.integers(0, K, len(d)) for d in docs], K)
    return params, ratings, docs, state


def make_rows(triples, text="", t0=0):
    """Interactions from (user, item, rating) triples with increasing timestamps."""
    return [Interaction(u, i, float(r), text, t0 + n) for n, (u, i, r) in enumerate(triples)]
