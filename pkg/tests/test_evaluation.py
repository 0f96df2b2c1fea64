import csv
import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ldalfm.config import RunConfig
from ldalfm.evaluation import (
    DETERMINISTIC_FIELDS,
    RESULT_FIELDS,
    ExperimentResult,
    GridFailed,
    GridSpec,
    grid_search,
    improvement,
    mse,
    read_results,
    run_experiment,
    summary_table,
    write_kstar_dat,
)
from ldalfm.hybrid import HybridConfig
from ldalfm.ingest import Interaction, RatingArrays
from ldalfm.optim import NonFiniteError
from ldalfm.pipeline import prepare_interactions
from ldalfm.synthetic import generate_planted

VAL = RatingArrays(np.array([0, 1]), np.array([0, 0]), np.array([4.0, 2.0]))


class Stub:
    def __init__(self, offset):
        self.offset = offset

    def predict(self, users, items):
        return VAL.ratings + self.offset


def stub_fit(scores):
    calls = []

    def fit(config, train, val, docs):
        calls.append((config.lam, config.mu))
        value = scores(config.lam, config.mu)
        if value is None:
            raise NonFiniteError("diverged")
        return Stub(value)

    fit.calls = calls
    return fit


def test_gridspec_validation():
    assert len(GridSpec()) == 25
    assert GridSpec().lambdas == (0.0, 0.001, 0.01, 1.0, 10.0)
    assert GridSpec().mus == (1.0, 10.0, 100.0, 1000.0, 10000.0)
    with pytest.raises(ValueError):
        GridSpec((), (1.0,))
    with pytest.raises(ValueError):
        GridSpec((-1.0,), (1.0,))


def test_single_cell_grid():
    best, records = grid_search(GridSpec((0.5,), (2.0,)), stub_fit(lambda l, m: 1.0), None, VAL, [], HybridConfig())
    assert (best.lam, best.mu) == (0.5, 2.0) and len(records) == 1


def test_full_grid_rigged_cell_wins():
    fit = stub_fit(lambda l, m: 0.0 if (l, m) == (1.0, 100.0) else 0.5 + l + m / 1e4)
    best, records = grid_search(GridSpec(), fit, None, VAL, [], HybridConfig(seed=7))
    assert len(records) == 25 and len(fit.calls) == 25
    assert (best.lam, best.mu, best.mse_val) == (1.0, 100.0, 0.0)
    assert best.mse_val == min(r.mse_val for r in records)


def test_ties_prefer_smaller_lambda_then_mu():
    best, _ = grid_search(GridSpec((1.0, 0.0), (5.0, 2.0)), stub_fit(lambda l, m: 0.3), None, VAL, [], HybridConfig())
    assert (best.lam, best.mu) == (0.0, 2.0)


def test_failed_cells_recorded_and_all_failed_raises():
    fit = stub_fit(lambda l, m: None if l == 0.0 else 0.2)
    best, records = grid_search(GridSpec((0.0, 1.0), (1.0,)), fit, None, VAL, [], HybridConfig())
    assert best.lam == 1.0 and records[0].error == "diverged"
    with pytest.raises(GridFailed) as info:
        grid_search(GridSpec((0.0, 1.0), (1.0, 2.0)), stub_fit(lambda l, m: None), None, VAL, [], HybridConfig())
    assert len(info.value.records) == 4 and all(r.error for r in info.value.records)


vec = arrays(np.float64, st.integers(1, 30), elements=st.floats(-100, 100))


@given(vec, st.floats(-10, 10), st.randoms(use_true_random=False))
@settings(max_examples=100, deadline=None)
def test_mse_invariants(err, c, rnd):
    perm = list(range(err.size))
    rnd.shuffle(perm)
    zeros = np.zeros(err.size)
    assert mse(err[perm], zeros) == pytest.approx(mse(err, zeros), rel=1e-12, abs=1e-300)
    assert mse(c * err, zeros) == pytest.approx(c * c * mse(err, zeros), rel=1e-9, abs=1e-12)


def test_constant_predictor_mse_is_variance():
    r = np.array([1.0, 3.0, 4.0, 4.0])
    assert mse(np.full(4, r.mean()), r) == pytest.approx(r.var())


def test_experiment_result_validation():
    with pytest.raises(ValueError):
        ExperimentResult("d", "svd", 5, 0, None, None, 0, 0.1, 0.1, 0.0)
    with pytest.raises(ValueError):
        ExperimentResult("d", "lfm", 5, 0, None, None, 0, float("nan"), 0.1, 0.0)


@pytest.fixture(scope="module")
def planted():
    data = generate_planted(seed=0)
    config = RunConfig(k_core=1, vocab_size=30, K=3, seed=0)
    return data, config, prepare_interactions(data.interactions, config, "planted")


def test_offset_only_closed_form(planted, tmp_path):
    _, config, prep = planted
    (res,) = run_experiment(prep, ["offset"], config, tmp_path)
    train = np.array([x.rating for x in prep.split.train])
    test = np.array([x.rating for x in prep.split.test])
    assert res.mse_test == np.mean((test - train.mean()) ** 2)
    rows = read_results(tmp_path / "results.csv")
    assert len(rows) == 1 and tuple(rows[0]) == RESULT_FIELDS
    assert json.loads((tmp_path / "results.json").read_text())[0]["model"] == "offset"


def test_all_models_and_determinism(planted, tmp_path):
    _, config, prep = planted
    models = ["offset", "baseline", "lfm", "ldafirst", "lda_lfm"]
    a = run_experiment(prep, models, config, tmp_path / "a")
    b = run_experiment(prep, models, config, tmp_path / "b")
    by_model = {r.model: r for r in a}
    assert by_model["lda_lfm"].mse_test <= by_model["offset"].mse_test
    for x, y in zip(a, b):
        assert [x.row()[k] for k in DETERMINISTIC_FIELDS] == [y.row()[k] for k in DETERMINISTIC_FIELDS]
    for m in models:
        assert (tmp_path / "a" / f"checkpoint_{m}.json").read_bytes() == (tmp_path / "b" / f"checkpoint_{m}.json").read_bytes()


def test_grid_run_uses_validation(planted, tmp_path):
    _, config, prep = planted
    grid = GridSpec((0.0, 1.0), (1.0, 10.0))
    (res,) = run_experiment(prep, ["lda_lfm"], config.replace(n_iter=5), tmp_path, grid)
    assert res.lam in (0.0, 1.0) and res.mu in (1.0, 10.0)
    (lfm,) = run_experiment(prep, ["lfm"], config.replace(n_iter=5), tmp_path / "l", grid)
    assert lfm.mu is None


def test_leakage_sentinel(planted, tmp_path):
    data, config, clean = planted
    held = {(x.user_id, x.item_id) for x in clean.split.test + clean.split.validation}
    poisoned_rows = [
        Interaction(x.user_id, x.item_id, 1.0, x.review_text + " zzsentinel", x.timestamp)
        if (x.user_id, x.item_id) in held else x
        for x in data.interactions
    ]
    dirty = prepare_interactions(poisoned_rows, config, "planted")
    assert dirty.split.train == clean.split.train
    models = ["baseline", "lfm", "ldafirst", "lda_lfm"]
    run_experiment(clean, models, config, tmp_path / "clean")
    run_experiment(dirty, models, config, tmp_path / "dirty")
    for m in models:
        c = json.loads((tmp_path / "clean" / f"checkpoint_{m}.json").read_text())
        d = json.loads((tmp_path / "dirty" / f"checkpoint_{m}.json").read_text())
        assert c["params"] == d["params"]


def test_failures_are_recorded_and_run_continues(planted, tmp_path):
    _, config, prep = planted
    results = run_experiment(prep, ["lfm", "offset"], config.replace(lr=1e7, n_iter=40), tmp_path)
    assert results[0].error and "iteration" in results[0].error
    assert results[1].error is None
    rows = read_results(tmp_path / "results.csv")
    assert rows[0]["mse_test"] == "" and rows[1]["mse_test"] != ""
    with pytest.raises(ValueError):
        run_experiment(prep, ["svd"], config, tmp_path)


def row(model, mse_test, K_star=0, mse_val="0.1", dataset="d"):
    return {"dataset": dataset, "model": model, "K": "5", "K_star": str(K_star), "lambda": "", "mu": "",
            "seed": "0", "mse_val": mse_val, "mse_test": str(mse_test), "wall_time_s": "0.0"}


def test_summary_and_improvement(tmp_path):
    assert improvement(2.0, 1.5) == 25.0
    rows = [row("lfm", 2.0), row("ldafirst", 1.6), row("lda_lfm", 1.2), row("offset", 3.0),
            row("lda_lfm", 1.1, K_star=2), row("lda_lfm", 9.0, mse_val="5.0")]
    table = summary_table(rows)
    assert len(table) == 2
    first = table[0]
    assert first["lda_lfm"] == 1.2  # the duplicate with worse validation MSE is ignored
    assert first["imp_lfm"] == pytest.approx(40.0) and first["imp_ldafirst"] == pytest.approx(25.0)
    assert table[1]["imp_lfm"] is None
    assert write_kstar_dat(rows, tmp_path / "k.dat") == 2
    data = [l.split() for l in (tmp_path / "k.dat").read_text().splitlines() if l and not l.startswith("#")]
    assert data == [["0", "1.2"], ["2", "1.1"]]
    with open(tmp_path / "bad.csv", "w") as fh:
        csv.writer(fh).writerow(["a", "b"])
    with pytest.raises(ValueError):
        read_results(tmp_path / "bad.csv")
