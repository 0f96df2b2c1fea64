"""Topic-model pieces: softmax links, corpus log-likelihood, topic sampling, Gibbs LDA."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from numba import njit

from .rng import stage_rng
from .textprep import ItemDocument, Vocabulary


@dataclass
class TopicState:
    """Per-document topic index arrays ``z[d][j]``."""

    z: list[np.ndarray]
    K: int
    log_likelihood: float | None = None

    def flat(self) -> np.ndarray:
        if not self.z:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(self.z).astype(np.int64)

    def check(self, docs: Sequence[ItemDocument]) -> None:
        if len(self.z) != len(docs) or any(len(a) != len(d) for a, d in zip(self.z, docs)):
            raise ValueError("topic state does not match corpus shape")
        flat = self.flat()
        if flat.size and (flat.min() < 0 or flat.max() >= self.K):
            raise ValueError("topic index out of range")

    def to_lists(self) -> list[list[int]]:
        return [a.tolist() for a in self.z]

    @classmethod
    def from_lists(cls, z: list[list[int]], K: int) -> "TopicState":
        return cls([np.array(a, dtype=np.int64) for a in z], K)


@dataclass
class TopicDistributions:
    theta: np.ndarray
    phi: np.ndarray


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def theta_from_q(Q: np.ndarray, kappa: float, K: int) -> np.ndarray:
    """Row softmax of ``kappa * Q[:, :K]``; extra columns are ignored."""
    Q = np.asarray(Q, dtype=np.float64)
    if Q.ndim != 2 or Q.shape[1] < K:
        raise ValueError(f"Q of shape {Q.shape} has fewer than K={K} columns")
    if not np.isfinite(kappa) or not np.all(np.isfinite(Q[:, :K])):
        raise ValueError("non-finite Q or kappa")
    return _softmax_rows(kappa * Q[:, :K])


def phi_from_psi(psi: np.ndarray) -> np.ndarray:
    psi = np.asarray(psi, dtype=np.float64)
    if not np.all(np.isfinite(psi)):
        raise ValueError("non-finite psi")
    return _softmax_rows(psi)


def distributions(params) -> TopicDistributions:
    return TopicDistributions(theta_from_q(params.Q, params.kappa, params.K), phi_from_psi(params.psi))


@dataclass
class FlatCorpus:
    """Concatenated word positions with their document ids."""

    words: np.ndarray
    doc_ids: np.ndarray
    lengths: np.ndarray

    @classmethod
    def from_docs(cls, docs: Sequence[ItemDocument]) -> "FlatCorpus":
        lengths = np.array([len(d) for d in docs], dtype=np.int64)
        words = np.concatenate([d.words for d in docs]).astype(np.int64) if docs else np.zeros(0, np.int64)
        return cls(words, np.repeat(np.arange(len(docs)), lengths), lengths)

    def split(self, flat: np.ndarray) -> list[np.ndarray]:
        return np.split(flat.astype(np.int64), np.cumsum(self.lengths)[:-1]) if len(self.lengths) else []


def corpus_log_likelihood(docs: Sequence[ItemDocument], dists: TopicDistributions, state: TopicState) -> float:
    """``sum_d sum_j log(theta[d, z] * phi[z, w])``."""
    corpus = FlatCorpus.from_docs(docs)
    z = state.flat()
    if z.size == 0:
        return 0.0
    return float(np.sum(np.log(dists.theta[corpus.doc_ids, z] * dists.phi[z, corpus.words])))


def topic_counts(docs: Sequence[ItemDocument], state: TopicState, V: int) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(n_dk, n_kw)`` count matrices for the given assignments."""
    corpus = FlatCorpus.from_docs(docs)
    z = state.flat()
    K = state.K
    n_dk = np.bincount(corpus.doc_ids * K + z, minlength=len(docs) * K).reshape(len(docs), K)
    n_kw = np.bincount(z * V + corpus.words, minlength=K * V).reshape(K, V)
    return n_dk, n_kw


def uniform_topics(docs: Sequence[ItemDocument], K: int, seed: int) -> TopicState:
    rng = stage_rng(seed, "init_topics")
    corpus = FlatCorpus.from_docs(docs)
    z = rng.integers(0, K, size=corpus.words.size)
    return TopicState(corpus.split(z), K)


def _categorical(weights: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(weights, axis=1)
    target = u * cdf[:, -1]
    k = (cdf <= target[:, None]).sum(axis=1)
    return np.minimum(k, weights.shape[1] - 1)


def sample_topics(docs: Sequence[ItemDocument], dists: TopicDistributions, seed: int, step: int = 0) -> TopicState:
    """Draw each ``z[d][j]`` with probability proportional to ``theta[d, k] * phi[k, w]``.

    Positions are visited document by document in index order, one uniform
    per position; ``step`` selects an independent stream for repeated
    resampling under one seed.  The log-likelihood of the drawn state is accumulated
    from the sampling weights and stored on the result.
    """
    corpus = FlatCorpus.from_docs(docs)
    K = dists.theta.shape[1]
    if corpus.words.size == 0:
        return TopicState([np.zeros(0, np.int64) for _ in docs], K, 0.0)
    weights = dists.theta[corpus.doc_ids] * dists.phi[:, corpus.words].T
    assert np.all(weights.sum(axis=1) > 0), "all topic weights zero for some word"
    u = stage_rng(seed, "sample_topics", step).random(corpus.words.size)
    z = _categorical(weights, u)
    loglik = float(np.sum(np.log(weights[np.arange(z.size), z])))
    return TopicState(corpus.split(z), K, loglik)


@njit(cache=True)
def _gibbs_sweep(words, doc_ids, z, n_dk, n_kw, n_k, gamma, nu, u):
    K = n_k.shape[0]
    V = n_kw.shape[1]
    p = np.empty(K)
    for n in range(words.shape[0]):
        w = words[n]
        d = doc_ids[n]
        k = z[n]
        n_dk[d, k] -= 1
        n_kw[k, w] -= 1
        n_k[k] -= 1
        total = 0.0
        for j in range(K):
            total += (n_dk[d, j] + gamma) * (n_kw[j, w] + nu) / (n_k[j] + V * nu)
            p[j] = total
        target = u[n] * total
        k = 0
        while k < K - 1 and p[k] <= target:
            k += 1
        z[n] = k
        n_dk[d, k] += 1
        n_kw[k, w] += 1
        n_k[k] += 1


class GibbsLDA:
    """Collapsed Gibbs sampler for LDA with symmetric priors ``gamma`` and ``nu``."""

    def __init__(self, docs: Sequence[ItemDocument], K: int, V: int, gamma: float = 0.1, nu: float = 0.1, seed: int = 0):
        if K < 1:
            raise ValueError("K must be >= 1")
        if gamma <= 0 or nu <= 0:
            raise ValueError("gamma and nu must be positive")
        self.docs = docs
        self.K, self.V = K, V
        self.gamma, self.nu = gamma, nu
        self.corpus = FlatCorpus.from_docs(docs)
        self.rng = stage_rng(seed, "gibbs")
        self.z = self.rng.integers(0, K, size=self.corpus.words.size).astype(np.int64)
        self.n_dk, self.n_kw = topic_counts(docs, self.state(), V)
        self.n_dk = self.n_dk.astype(np.int64)
        self.n_kw = self.n_kw.astype(np.int64)
        self.n_k = self.n_kw.sum(axis=1)

    def state(self) -> TopicState:
        return TopicState(self.corpus.split(self.z), self.K)

    def sweep(self) -> None:
        u = self.rng.random(self.z.size)
        _gibbs_sweep(self.corpus.words, self.corpus.doc_ids, self.z, self.n_dk, self.n_kw, self.n_k, self.gamma, self.nu, u)

    def distributions(self) -> TopicDistributions:
        theta = (self.n_dk + self.gamma) / (self.corpus.lengths[:, None] + self.K * self.gamma)
        phi = (self.n_kw + self.nu) / (self.n_k[:, None] + self.V * self.nu)
        return TopicDistributions(theta, phi)


def fit_lda_gibbs(
    docs: Sequence[ItemDocument], K: int, V: int, gamma: float = 0.1, nu: float = 0.1, n_sweeps: int = 200, seed: int = 0
) -> tuple[TopicDistributions, TopicState]:
    """Posterior-mean theta/phi after ``n_sweeps`` collapsed Gibbs sweeps."""
    lda = GibbsLDA(docs, K, V, gamma, nu, seed)
    for _ in range(n_sweeps):
        lda.sweep()
    return lda.distributions(), lda.state()


def top_words(phi: np.ndarray, vocab: Vocabulary, n: int = 10) -> list[list[tuple[str, float]]]:
    out = []
    for row in phi:
        order = np.lexsort((np.arange(row.size), -row))[:n]
        out.append([(vocab.tokens[j], float(row[j])) for j in order])
    return out


def write_topic_dump(phi: np.ndarray, vocab: Vocabulary, path: str | Path, n: int = 10) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["topic", "rank", "word", "phi"])
        for k, words in enumerate(top_words(phi, vocab, n)):
            for rank, (word, p) in enumerate(words, start=1):
                writer.writerow([k, rank, word, repr(p)])
