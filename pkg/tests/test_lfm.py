import csv

import numpy as np
import pytest

from ldalfm.ingest import RatingArrays, split_dataset
from ldalfm.lfm import (
    TrainingDiverged,
    baseline_predict,
    check_objective,
    fit_lfm,
    lfm_objective,
    mse,
    offset_predict,
    predict_rating,
    rating_loss_and_grad,
    rating_stats,
    write_trace_csv,
)
from ldalfm.optim import ParamSet, finite_diff_gradient, init_params
from ldalfm.synthetic import generate_planted


def zero_params(n_users=2, n_items=2, K=1, alpha=0.0) -> ParamSet:
    return ParamSet(alpha, np.zeros(n_users), np.zeros(n_items), np.zeros((n_users, K)), np.zeros((n_items, K)),
                    np.zeros((K, 1)), 1.0, K)


def arrays(users, items, ratings) -> RatingArrays:
    return RatingArrays(np.array(users), np.array(items), np.array(ratings, dtype=float))


def test_predict_rating_examples():
    p = zero_params(alpha=4.0)
    assert predict_rating(p, 1, 1) == 4.0
    p.b_user[0], p.b_item[1] = 0.1, -0.2
    p.P[0, 0], p.Q[1, 0] = 0.5, 0.1
    assert predict_rating(p, 0, 1) == pytest.approx(3.95, abs=1e-12)
    q = zero_params(K=2, alpha=3.0)
    q.b_user[0], q.b_item[0] = 0.3, 0.4
    q.P[0], q.Q[0] = (1.0, 0.0), (0.0, 2.0)
    assert predict_rating(q, 0, 0) == pytest.approx(3.7)
    with pytest.raises(IndexError):
        predict_rating(p, 5, 0)


def test_lfm_objective_examples():
    p = zero_params(alpha=3.0)
    assert lfm_objective(p, arrays([0, 1], [0, 1], [3.0, 3.0]), 0.0) == 0.0
    one = arrays([0], [0], [5.0])
    assert lfm_objective(p, one, 0.0) == pytest.approx(4.0)
    p.P[0, 0] = 0.5
    assert lfm_objective(p, one, 1.0) == pytest.approx(4.25)
    with pytest.raises(ValueError):
        lfm_objective(p, arrays([], [], []), 0.0)
    with pytest.raises(ValueError):
        lfm_objective(p, one, -1.0)


def test_lfm_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    p = init_params(5, 4, np.array([3.0]), K=2, sigma=0.5, seed=3)
    data = arrays(rng.integers(0, 5, 15), rng.integers(0, 4, 15), rng.integers(1, 6, 15))
    for normalize in (True, False):
        scale = 1.0 / len(data) if normalize else 1.0
        _, g = rating_loss_and_grad(p, data, 0.3, scale)
        fd = finite_diff_gradient(lambda q: lfm_objective(q, data, 0.3, normalize=normalize), p)
        np.testing.assert_allclose(g.flatten(), fd.flatten(), rtol=1e-4, atol=1e-7)


def test_q_norm_switch():
    p = init_params(3, 3, np.array([3.0]), K=2, sigma=0.5, seed=1)
    data = arrays([0, 1], [1, 2], [4.0, 2.0])
    with_q = lfm_objective(p, data, 0.5)
    without = lfm_objective(p, data, 0.5, include_q_norm=False)
    assert with_q - without == pytest.approx(0.5 * np.sum(p.Q**2))


def test_offset_and_baseline_examples():
    st = rating_stats(arrays([0, 1], [0, 1], [2.0, 4.0]), 2, 2)
    assert offset_predict(st) == 3.0
    assert offset_predict(rating_stats(arrays([0], [0], [5.0]), 1, 1)) == 5.0
    assert offset_predict(rating_stats(arrays([0, 0, 0], [0, 1, 2], [1.0, 1.0, 4.0]), 1, 3)) == 2.0
    # user 0 rated {5, 5}, item 1 rated {1}; alpha = 3
    st = rating_stats(arrays([0, 0, 1], [0, 0, 1], [5.0, 5.0, 1.0]), 2, 2)
    assert st.alpha == pytest.approx(11 / 3)
    st2 = rating_stats(arrays([0, 0, 1, 1], [0, 0, 1, 1], [5.0, 5.0, 1.0, 1.0]), 2, 2)
    assert baseline_predict(st2, 0, 1) == pytest.approx(3.0)  # 3 + 2 - 2
    flat = rating_stats(arrays([0, 1], [0, 1], [3.0, 3.0]), 2, 2)
    assert baseline_predict(flat, 0, 1) == 3.0
    with pytest.raises(IndexError):
        baseline_predict(flat, 2, 0)


def test_baseline_sum():
    from ldalfm.lfm import RatingStats

    st = RatingStats(4.0, np.array([0.5]), np.array([0.25]))
    assert baseline_predict(st, 0, 0) == 4.75


def test_offset_train_mse_is_variance():
    r = np.array([1.0, 2.0, 2.0, 5.0, 4.0])
    st = rating_stats(arrays([0] * 5, [0] * 5, r), 1, 1)
    assert mse(np.full(5, offset_predict(st)), r) == pytest.approx(np.var(r))


def test_mse_examples_and_errors():
    assert mse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert mse([3.0, 5.0], [4.0, 4.0]) == 1.0
    with pytest.raises(ValueError):
        mse([1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        mse([], [])


def test_bias_symmetry_under_user_permutation():
    rng = np.random.default_rng(2)
    p = init_params(6, 4, np.array([3.0]), K=3, sigma=0.5, seed=2)
    perm = rng.permutation(6)
    q = p.copy()
    q.b_user = p.b_user[perm]
    q.P = p.P[perm]
    inv = np.argsort(perm)
    users, items = rng.integers(0, 6, 20), rng.integers(0, 4, 20)
    np.testing.assert_array_equal(p.predict(users, items), q.predict(inv[users], items))


def test_fit_lfm_recovers_planted_model():
    data = generate_planted(n_users=50, n_items=40, K=2, V=4, n_ratings=1600, noise=0.1, words_per_review=1,
                            factor_scale=0.5, seed=0)
    split = split_dataset(data.interactions, 0)
    tr, va, te = split.arrays("train"), split.arrays("validation"), split.arrays("test")
    fit = fit_lfm(tr, va, split.n_users, split.n_items, K=2, lam=0.0, n_iter=2000, seed=0)
    assert mse(fit.predict(te.users, te.items), te.ratings) <= 2 * 0.1**2


def test_fit_lfm_bias_only_limit():
    # zero-initialised factors get zero gradient, which leaves a pure bias model
    rng = np.random.default_rng(4)
    b_u, b_i = rng.normal(0, 0.5, 8), rng.normal(0, 0.5, 6)
    users, items = np.meshgrid(np.arange(8), np.arange(6), indexing="ij")
    users, items = users.ravel(), items.ravel()
    data = arrays(users, items, 3.0 + b_u[users] + b_i[items])
    fit = fit_lfm(data, None, 8, 6, K=1, lam=0.0, n_iter=1500, lr=0.01, sigma_init=0.0)
    assert np.all(fit.params.P == 0) and np.all(fit.params.Q == 0)
    assert mse(fit.predict(users, items), data.ratings) < 1e-3


def test_fit_lfm_determinism_and_trace(tmp_path):
    data = arrays([0, 1, 2, 0], [0, 1, 0, 1], [5.0, 3.0, 4.0, 2.0])
    a = fit_lfm(data, data, 3, 2, K=2, lam=0.01, n_iter=10, seed=3)
    b = fit_lfm(data, data, 3, 2, K=2, lam=0.01, n_iter=10, seed=3)
    assert np.array_equal(a.params.flatten(), b.params.flatten())
    assert [row["iteration"] for row in a.trace] == list(range(1, 11))
    assert a.trace == b.trace
    write_trace_csv(a.trace, tmp_path / "t.csv")
    rows = list(csv.DictReader(open(tmp_path / "t.csv")))
    assert list(rows[0]) == ["iteration", "train_objective", "val_mse"] and len(rows) == 10
    with pytest.raises(ValueError):
        fit_lfm(data, None, 3, 2, K=2, n_iter=0)


def test_divergence_reports_iteration():
    data = arrays([0, 1], [0, 1], [5.0, 1.0])
    with pytest.raises(TrainingDiverged) as info:
        fit_lfm(data, None, 2, 2, K=2, n_iter=50, lr=1e7)
    assert info.value.iteration >= 1
    with pytest.raises(TrainingDiverged, match="iteration 7"):
        check_objective(float("nan"), 7)
