import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ldalfm.textprep import ItemDocument, Vocabulary
from ldalfm.topicmodel import (
    GibbsLDA,
    TopicDistributions,
    TopicState,
    corpus_log_likelihood,
    fit_lda_gibbs,
    phi_from_psi,
    sample_topics,
    theta_from_q,
    topic_counts,
    top_words,
    uniform_topics,
    write_topic_dump,
)


def doc(i, words):
    return ItemDocument(i, np.array(words, dtype=np.int64), 1)


def disjoint_corpus(n_docs=20, length=30, seed=0):
    """Half the documents use words {0, 1}, the other half {2, 3}."""
    rng = np.random.default_rng(seed)
    docs = [doc(d, rng.integers(0, 2, length) + (2 if d >= n_docs // 2 else 0)) for d in range(n_docs)]
    labels = np.array([0] * (n_docs // 2) + [1] * (n_docs - n_docs // 2))
    return docs, labels


def test_theta_limits_and_hand_value():
    Q = np.array([[1.0, 0.0], [3.0, -2.0]])
    np.testing.assert_array_equal(theta_from_q(Q, 0.0, 2), np.full((2, 2), 0.5))
    assert theta_from_q(np.array([[1.0, 0.0]]), 1.0, 2)[0] == pytest.approx([0.73106, 0.26894], abs=1e-5)
    assert theta_from_q(np.array([[5.0, 0.0]]), 100.0, 2)[0, 0] >= 1 - 1e-9


def test_theta_ignores_extra_columns():
    Q = np.array([[0.2, 0.1, 50.0, -9.0]])
    np.testing.assert_array_equal(theta_from_q(Q, 1.3, 2), theta_from_q(Q[:, :2], 1.3, 2))
    with pytest.raises(ValueError):
        theta_from_q(Q, 1.0, 5)
    with pytest.raises(ValueError):
        theta_from_q(Q, float("nan"), 2)


def test_phi_examples():
    np.testing.assert_array_equal(phi_from_psi(np.zeros((1, 4))), [[0.25] * 4])
    assert phi_from_psi(np.array([[math.log(2), 0.0]]))[0] == pytest.approx([2 / 3, 1 / 3])
    psi = np.array([[0.3, -1.2, 2.0]])
    np.testing.assert_allclose(phi_from_psi(psi + 17.5), phi_from_psi(psi), rtol=1e-12)


big = arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=st.floats(-1e3, 1e3))


@given(big, st.floats(0.0, 1e3))
@settings(max_examples=200, deadline=None)
def test_softmaxes_are_row_stochastic(x, kappa):
    for out in (theta_from_q(x, kappa, x.shape[1]), phi_from_psi(x)):
        assert np.all(out >= 0)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)


@given(arrays(np.float64, 4, elements=st.floats(-5, 5)), st.floats(0.01, 10))
@settings(max_examples=200, deadline=None)
def test_theta_monotone(q, kappa):
    theta = theta_from_q(q[None, :], kappa, 4)[0]
    for a in range(4):
        for b in range(4):
            if q[a] - q[b] > 1e-6:
                assert theta[a] > theta[b]


def test_log_likelihood_examples():
    empty = TopicDistributions(np.zeros((0, 2)), np.full((2, 3), 1 / 3))
    assert corpus_log_likelihood([], empty, TopicState([], 2)) == 0.0
    dists = TopicDistributions(np.array([[0.5, 0.5]]), np.array([[0.2, 0.8], [0.5, 0.5]]))
    assert corpus_log_likelihood([doc(0, [0])], dists, TopicState([np.array([0])], 2)) == pytest.approx(math.log(0.1))
    docs = [doc(0, [0, 1, 1]), doc(1, [1])]
    theta = np.array([[0.3, 0.7], [0.6, 0.4]])
    d2 = TopicDistributions(np.vstack([theta, theta]), dists.phi)
    state = TopicState([np.array([0, 1, 0]), np.array([1])], 2)
    single = corpus_log_likelihood(docs, TopicDistributions(theta, dists.phi), state)
    doubled = corpus_log_likelihood(docs + [doc(2, [0, 1, 1]), doc(3, [1])], d2, TopicState(state.z * 2, 2))
    assert doubled == pytest.approx(2 * single) and single <= 0


def test_sample_single_topic():
    docs = [doc(0, [0, 1, 2]), doc(1, [2])]
    dists = TopicDistributions(np.ones((2, 1)), np.full((1, 3), 1 / 3))
    state = sample_topics(docs, dists, seed=1)
    assert all(np.all(z == 0) for z in state.z)


def binomial_ok(count, n, p):
    return abs(count / n - p) <= 3 * math.sqrt(p * (1 - p) / n)


def test_sampler_binomial_oracle():
    n = 100_000
    dists = TopicDistributions(np.array([[0.9, 0.1]]), np.full((2, 1), 1.0))
    state = sample_topics([doc(0, np.zeros(n, dtype=int))], dists, seed=0)
    assert binomial_ok(int(np.sum(state.z[0] == 0)), n, 0.9)


def test_sampler_zero_weight_never_drawn():
    phi = np.array([[0.5, 0.5], [0.5, 0.5], [0.0, 1.0]])
    dists = TopicDistributions(np.full((1, 3), 1 / 3), phi)
    state = sample_topics([doc(0, np.zeros(5000, dtype=int))], dists, seed=2)
    assert not np.any(state.z[0] == 2)


def test_sampler_reproducible_and_incremental_likelihood():
    rng = np.random.default_rng(3)
    docs = [doc(d, rng.integers(0, 6, rng.integers(0, 9))) for d in range(7)]
    dists = TopicDistributions(theta_from_q(rng.normal(size=(7, 3)), 1.5, 3), phi_from_psi(rng.normal(size=(3, 6))))
    a, b = sample_topics(docs, dists, 4, step=2), sample_topics(docs, dists, 4, step=2)
    assert all(np.array_equal(x, y) for x, y in zip(a.z, b.z))
    a.check(docs)
    assert abs(a.log_likelihood - corpus_log_likelihood(docs, dists, a)) <= 1e-8
    c = sample_topics(docs, dists, 4, step=3)
    assert any(not np.array_equal(x, y) for x, y in zip(a.z, c.z))


def test_gibbs_separable_recovery():
    docs, labels = disjoint_corpus()
    dists, state = fit_lda_gibbs(docs, K=2, V=4, n_sweeps=200, seed=0)
    top = dists.theta.argmax(axis=1)
    assert np.all(dists.theta.max(axis=1) >= 0.9)
    # topics are labelled by the majority word set, so one consistent relabelling must fit
    assert np.all(top == labels) or np.all(top == 1 - labels)


def test_gibbs_zero_sweeps_is_smoothed_initial_counts():
    docs, _ = disjoint_corpus(6, 5)
    lda = GibbsLDA(docs, 3, 4, 0.1, 0.1, seed=2)
    n_dk, n_kw = topic_counts(docs, lda.state(), 4)
    dists, _ = fit_lda_gibbs(docs, 3, 4, 0.1, 0.1, n_sweeps=0, seed=2)
    np.testing.assert_allclose(dists.theta, (n_dk + 0.1) / (5 + 0.3))
    np.testing.assert_allclose(dists.phi, (n_kw + 0.1) / (n_kw.sum(axis=1, keepdims=True) + 0.4))


def test_gibbs_single_topic():
    docs = [doc(0, [0, 0, 1]), doc(1, [2])]
    dists, _ = fit_lda_gibbs(docs, 1, 3, n_sweeps=5)
    np.testing.assert_allclose(dists.theta, 1.0)
    np.testing.assert_allclose(dists.phi[0], (np.array([2, 1, 1]) + 0.1) / (4 + 0.3))


def test_gibbs_count_caches_match_recount():
    rng = np.random.default_rng(6)
    docs = [doc(d, rng.integers(0, 7, rng.integers(0, 12))) for d in range(9)]
    lda = GibbsLDA(docs, 3, 7, seed=1)
    for _ in range(10):
        lda.sweep()
        n_dk, n_kw = topic_counts(docs, lda.state(), 7)
        np.testing.assert_array_equal(lda.n_dk, n_dk)
        np.testing.assert_array_equal(lda.n_kw, n_kw)
        np.testing.assert_array_equal(lda.n_k, n_kw.sum(axis=1))


def test_gibbs_empty_doc_uniform_and_determinism():
    docs = [doc(0, [0, 1, 1]), doc(1, [])]
    a, sa = fit_lda_gibbs(docs, 4, 2, n_sweeps=3, seed=5)
    b, sb = fit_lda_gibbs(docs, 4, 2, n_sweeps=3, seed=5)
    np.testing.assert_allclose(a.theta[1], 0.25)
    assert np.array_equal(a.theta, b.theta) and sa.to_lists() == sb.to_lists()
    with pytest.raises(ValueError):
        GibbsLDA(docs, 0, 2)
    with pytest.raises(ValueError):
        GibbsLDA(docs, 2, 2, gamma=0.0)


def test_uniform_topics_and_state_checks():
    docs = [doc(0, [0, 1, 1]), doc(1, [])]
    state = uniform_topics(docs, 3, 0)
    state.check(docs)
    assert TopicState.from_lists(state.to_lists(), 3).to_lists() == state.to_lists()
    with pytest.raises(ValueError):
        TopicState([np.array([0, 5, 0]), np.array([])], 3).check(docs)
    with pytest.raises(ValueError):
        TopicState([np.array([0])], 3).check(docs)


def test_topic_dump(tmp_path):
    vocab = Vocabulary(tuple("abcdefghijkl"))
    phi = phi_from_psi(np.arange(24, dtype=float).reshape(2, 12))
    assert [w for w, _ in top_words(phi, vocab, 3)[0]] == ["l", "k", "j"]
    write_topic_dump(phi, vocab, tmp_path / "t.csv")
    rows = list(csv.DictReader(open(tmp_path / "t.csv")))
    assert len(rows) == 20 and rows[0]["word"] == "l" and rows[0]["rank"] == "1"
