"""The joint rating/topic model (LDA-LFM), its extra-feature extension and LDAFirst."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .ingest import RatingArrays
from .lfm import FitResult, TrainingDiverged, _trace_row, check_objective, rating_loss_and_grad
from .optim import KAPPA_INIT, SIGMA_INIT, AdamState, NonFiniteError, ParamSet, adam_step, init_params
from .textprep import ItemDocument
from .topicmodel import FlatCorpus, TopicState, distributions, fit_lda_gibbs, phi_from_psi, sample_topics, uniform_topics


@dataclass
class HybridConfig:
    K: int = 5
    K_star: int = 0
    lam: float = 0.0
    mu: float = 1.0
    n_iter: int = 35
    seed: int = 0
    lr: float = 0.01
    inner_steps: int = 1
    gamma: float = 0.1
    nu: float = 0.1
    gibbs_sweeps: int = 200
    kappa0: float = KAPPA_INIT
    sigma_init: float = SIGMA_INIT

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.K_star < 0:
            raise ValueError("K_star must be >= 0")
        if self.lam < 0 or self.mu < 0:
            raise ValueError("lambda and mu must be >= 0")
        if self.n_iter < 1 or self.inner_steps < 1:
            raise ValueError("n_iter and inner_steps must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


class FactorShapes(NamedTuple):
    factor_width: int
    theta_width: int
    q_reg_cols: slice | None


def extend_with_extra_features(config: HybridConfig) -> FactorShapes:
    """Shape contract of the extra-feature extension.

    P and Q get ``K + K_star`` columns, the topic softmax reads the first
    ``K``, and the ``K_star`` trailing Q columns are L2-regularised with
    ``lam`` since the topic term never touches them.
    """
    if config.K_star < 0:
        raise ValueError("K_star must be >= 0")
    cols = slice(config.K, None) if config.K_star else None
    return FactorShapes(config.K + config.K_star, config.K, cols)


class _TopicCounts(NamedTuple):
    n_dk: np.ndarray
    n_kw: np.ndarray
    lengths: np.ndarray


def _counts(docs: Sequence[ItemDocument], state: TopicState, V: int) -> _TopicCounts:
    corpus = FlatCorpus.from_docs(docs)
    z = state.flat()
    K = state.K
    n_dk = np.bincount(corpus.doc_ids * K + z, minlength=len(docs) * K).reshape(len(docs), K).astype(np.float64)
    n_kw = np.bincount(z * V + corpus.words, minlength=K * V).reshape(K, V).astype(np.float64)
    return _TopicCounts(n_dk, n_kw, corpus.lengths.astype(np.float64))


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=1, keepdims=True))


def _check_shapes(params: ParamSet, docs: Sequence[ItemDocument], state: TopicState) -> None:
    if len(docs) != params.n_items:
        raise ValueError(f"{len(docs)} documents for {params.n_items} items")
    if state.K != params.K:
        raise ValueError(f"topic state has K={state.K}, parameters K={params.K}")
    state.check(docs)
    for d in docs:
        if len(d) and (d.words.min() < 0 or d.words.max() >= params.V):
            raise ValueError(f"document {d.item_id} has word ids outside vocabulary of size {params.V}")


def _topic_loglik_and_grad(params: ParamSet, c: _TopicCounts):
    """Corpus log-likelihood at fixed z and its gradient in (Q[:, :K], kappa, psi)."""
    K = params.K
    Qk = params.Q[:, :K]
    log_theta = _log_softmax(params.kappa * Qk)
    log_phi = _log_softmax(params.psi)
    loglik = float(np.sum(c.n_dk * log_theta)) + float(np.sum(c.n_kw * log_phi))

    theta = np.exp(log_theta)
    phi = np.exp(log_phi)
    # d log theta[d, z] / d q[d, k] = kappa * (1[k = z] - theta[d, k]), summed over words
    resid = c.n_dk - c.lengths[:, None] * theta
    g_q = params.kappa * resid
    g_kappa = float(np.sum(resid * Qk))
    g_psi = c.n_kw - c.n_kw.sum(axis=1, keepdims=True) * phi
    return loglik, g_q, g_kappa, g_psi


def _joint(params, train, counts, lam, mu, shapes: FactorShapes):
    loss, grad = rating_loss_and_grad(params, train, lam, 1.0, shapes.q_reg_cols)
    if mu != 0.0:
        loglik, g_q, g_kappa, g_psi = _topic_loglik_and_grad(params, counts)
        loss -= mu * loglik
        grad.Q[:, : params.K] -= mu * g_q
        grad.kappa = -mu * g_kappa
        grad.psi = -mu * g_psi
    return loss, grad


def _shapes_of(params: ParamSet) -> FactorShapes:
    cols = slice(params.K, None) if params.K_star else None
    return FactorShapes(params.K + params.K_star, params.K, cols)


def joint_loss_and_grad(
    params: ParamSet,
    train: RatingArrays,
    docs: Sequence[ItemDocument],
    state: TopicState,
    lam: float,
    mu: float,
) -> tuple[float, ParamSet]:
    if lam < 0 or mu < 0:
        raise ValueError("lambda and mu must be >= 0")
    _check_shapes(params, docs, state)
    loss, grad = _joint(params, train, _counts(docs, state, params.V), lam, mu, _shapes_of(params))
    for name, block in grad.blocks().items():
        if not np.all(np.isfinite(block)):
            raise NonFiniteError(f"non-finite gradient in block {name!r}", block=name)
    return loss, grad


def joint_objective(params, train, docs, state, lam, mu) -> float:
    """Squared-error sum + lam * (|P|^2 + |b_u|^2 + |b_i|^2 + |Q[:, K:]|^2) - mu * corpus log-likelihood."""
    return joint_loss_and_grad(params, train, docs, state, lam, mu)[0]


def joint_gradient(params, train, docs, state, lam, mu) -> ParamSet:
    return joint_loss_and_grad(params, train, docs, state, lam, mu)[1]


def fit_lda_lfm(
    config: HybridConfig,
    train: RatingArrays,
    val: RatingArrays | None,
    docs: Sequence[ItemDocument],
    n_users: int,
    n_items: int,
    V: int,
) -> FitResult:
    """Alternate Adam updates at fixed topic assignments with topic resampling.

    Each outer iteration takes ``inner_steps`` full-batch Adam steps on the
    joint objective, then redraws every ``z`` from the updated theta/phi.
    """
    if len(docs) != n_items:
        raise ValueError(f"{len(docs)} documents for {n_items} items")
    shapes = extend_with_extra_features(config)
    params = init_params(
        n_users, n_items, train.ratings, config.K, config.K_star, V, config.seed, config.sigma_init, config.kappa0
    )
    state = uniform_topics(docs, config.K, config.seed)
    _check_shapes(params, docs, state)
    adam = AdamState.fresh(params, lr=config.lr)
    trace = []
    for it in range(1, config.n_iter + 1):
        counts = _counts(docs, state, V)
        for _ in range(config.inner_steps):
            loss, grad = _joint(params, train, counts, config.lam, config.mu, shapes)
            check_objective(loss, it)
            try:
                params, adam = adam_step(params, grad, adam)
            except NonFiniteError as exc:
                raise TrainingDiverged(f"{exc} at iteration {it}", block=exc.block, iteration=it) from exc
        objective = _joint(params, train, counts, config.lam, config.mu, shapes)[0]
        check_objective(objective, it)
        trace.append(_trace_row(it, objective, params, val))
        state = sample_topics(docs, distributions(params), config.seed, step=it)
    return FitResult("lda_lfm", params, trace, topic_state=state, seed=config.seed, phi=phi_from_psi(params.psi))


def fit_ldafirst(
    config: HybridConfig,
    train: RatingArrays,
    val: RatingArrays | None,
    docs: Sequence[ItemDocument],
    n_users: int,
    n_items: int,
    V: int,
) -> FitResult:
    """Fit LDA on the item documents, freeze Q at the topic proportions, train the rest.

    Only alpha, b_u, b_i and P are updated, on the normalised squared error
    with ``lam`` on P and the biases.
    """
    if len(docs) != n_items:
        raise ValueError(f"{len(docs)} documents for {n_items} items")
    if len(train) == 0:
        raise ValueError("empty training set")
    dists, topic_state = fit_lda_gibbs(docs, config.K, V, config.gamma, config.nu, config.gibbs_sweeps, config.seed)
    params = init_params(n_users, n_items, train.ratings, config.K, 0, V, config.seed, config.sigma_init, config.kappa0)
    params.Q = dists.theta.copy()
    scale = 1.0 / len(train)
    adam = AdamState.fresh(params, lr=config.lr)
    frozen = ("Q", "psi", "kappa")
    trace = []
    for it in range(1, config.n_iter + 1):
        loss, grad = rating_loss_and_grad(params, train, config.lam, scale, None)
        check_objective(loss, it)
        try:
            params, adam = adam_step(params, grad, adam, frozen=frozen)
        except NonFiniteError as exc:
            raise TrainingDiverged(f"{exc} at iteration {it}", block=exc.block, iteration=it) from exc
        objective = rating_loss_and_grad(params, train, config.lam, scale, None)[0]
        check_objective(objective, it)
        trace.append(_trace_row(it, objective, params, val))
    return FitResult("ldafirst", params, trace, topic_state=topic_state, seed=config.seed, phi=dists.phi)
