import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqbench import hpo
from seqbench.ehr import GeneratorSpec, generate_cohort, split_cohort
from seqbench.evaluation import select_best
from seqbench.hpo import (
    Dimension,
    SearchSpace,
    StudyData,
    Trial,
    best_so_far,
    default_space,
    expected_improvement,
    fit_surrogate,
    maximize,
    read_ledger,
    run_study,
    split_budget,
    suggest_next,
)


def matern_oracle(a, b, ls, var):
    out = np.empty((len(a), len(b)))
    for i, x in enumerate(a):
        for j, y in enumerate(b):
            r = math.sqrt(sum(((xi - yi) / ls) ** 2 for xi, yi in zip(x, y)))
            out[i, j] = var * (1 + math.sqrt(5) * r + 5 * r * r / 3) * math.exp(-math.sqrt(5) * r)
    return out


class TestExpectedImprovement:
    def test_degenerate(self):
        assert expected_improvement(0.7, 0.0, 0.7) == 0.0

    def test_pdf_at_zero(self):
        assert expected_improvement(0.5, 1.0, 0.5, xi=0.0) == pytest.approx(1 / math.sqrt(2 * math.pi), abs=1e-12)

    def test_limit_small_sigma(self):
        assert expected_improvement(1.01, 1e-9, 0.0) == pytest.approx(1.0, abs=1e-8)
        assert expected_improvement(1.01, 0.0, 0.0) == pytest.approx(1.0, abs=1e-15)

    @given(st.floats(-5, 5), st.floats(0, 5), st.floats(-5, 5))
    def test_nonnegative(self, mu, sigma, best):
        assert expected_improvement(mu, sigma, best) >= 0.0

    def test_nondecreasing_in_sigma(self):
        for mu in (0.2, 0.5, 1.0):
            ei = expected_improvement(np.full(200, mu), np.linspace(0, 3, 200), 0.1)
            assert np.all(np.diff(ei) >= -1e-15)

    def test_negative_sigma(self):
        with pytest.raises(ValueError):
            expected_improvement(0.0, -1.0, 0.0)


class TestSurrogate:
    def test_single_point_interpolates(self):
        gp = fit_surrogate([[0.3, 0.6]], [0.77])
        mu, sigma = gp([[0.3, 0.6]])
        assert abs(mu[0] - 0.77) <= 1e-3 and sigma[0] <= 1e-2

    def test_prior_reversion(self):
        rng = np.random.default_rng(0)
        x = np.linspace(0.0, 0.25, 6)[:, None]
        y = rng.uniform(0.6, 0.8, size=6)
        gp = fit_surrogate(x, y)
        mu, sigma = gp([[1.5]])  # beyond 5 length-scales of every datum
        assert mu[0] == pytest.approx(y.mean(), rel=0.05)
        assert sigma[0] == pytest.approx(np.std(y, ddof=1), rel=0.05)

    def test_matches_kernel_solve_oracle(self):
        x = np.array([[0.05], [0.2], [0.45], [0.6], [0.9]])
        y = np.array([0.61, 0.72, 0.69, 0.80, 0.66])
        q = np.linspace(0, 1, 11)[:, None]
        mean, var = y.mean(), max(np.var(y, ddof=1), 1e-4)
        K = matern_oracle(x, x, 0.2, var) + 1e-6 * np.eye(5)
        k = matern_oracle(q, x, 0.2, var)
        expected = mean + k @ np.linalg.solve(K, y - mean)
        mu, _ = fit_surrogate(x, y)(q)
        np.testing.assert_allclose(mu, expected, atol=1e-8, rtol=0)

    def test_variance_small_at_observations(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(size=(12, 5))
        y = rng.uniform(0.5, 0.9, size=12)
        gp = fit_surrogate(x, y)
        _, sigma = gp(x)
        assert np.all(sigma ** 2 <= gp.jitter * 2)

    def test_duplicate_points(self):
        gp = fit_surrogate([[0.5], [0.5], [0.2]], [0.6, 0.62, 0.3])
        mu, _ = gp([[0.5]])
        assert 0.59 < mu[0] < 0.63

    def test_needs_data(self):
        with pytest.raises(hpo.SurrogateError):
            fit_surrogate(np.zeros((0, 2)), [])


class TestSuggest:
    def test_warmup_reproducible_and_in_bounds(self):
        space = default_space()
        a = suggest_next([], space, np.random.default_rng(3))
        b = suggest_next([], space, np.random.default_rng(3))
        assert a == b
        assert all(0 <= u <= 1 for u in a[0])

    def test_flat_acquisition_returns_first_candidate(self, monkeypatch):
        trials = [Trial(i, [i / 10, 0.5], {}, valid_auroc=0.5) for i in range(10)]
        monkeypatch.setattr(hpo, "expected_improvement", lambda mu, sigma, best, xi=0.01: np.zeros(len(mu)))
        rng = np.random.default_rng(9)
        point = hpo.suggest_point(trials, 2, rng)
        expected = np.random.default_rng(9).uniform(size=(1000, 2))[0]
        np.testing.assert_array_equal(point, expected)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=5, max_size=5))
    def test_decoded_in_bounds(self, u):
        for dim, value in zip(default_space().dims, default_space().decode(u).values()):
            assert dim.low <= value <= dim.high
            if dim.integer:
                assert isinstance(value, int)

    def test_quadratic_objective(self):
        space = SearchSpace((Dimension("x", 0.0, 1.0),))
        for seed in range(3):
            trials = maximize(lambda p: -(p["x"] - 0.3) ** 2, space, 30, seed)
            best = max(trials, key=lambda t: t.valid_auroc)
            assert abs(best.params["x"] - 0.3) <= 0.05

    def test_dimension_validation(self):
        with pytest.raises(ValueError):
            Dimension("x", 1.0, 1.0)
        with pytest.raises(ValueError):
            Dimension("x", 0.0, 1.0, "log")


def test_split_budget():
    fams = ["A", "B", "C"]
    assert split_budget(7, fams) == [("A", 3), ("B", 2), ("C", 2)]
    assert split_budget(2, fams) == [("A", 1), ("B", 1)]
    assert sum(n for _, n in split_budget(15, list("abcdefg"))) == 15


def test_best_so_far_nondecreasing():
    trials = [Trial(i, [0.0], {}, valid_auroc=v) for i, v in enumerate([0.5, 0.4, 0.7, 0.6, 0.71])]
    assert best_so_far(trials) == [0.5, 0.5, 0.7, 0.7, 0.71]


@pytest.fixture(scope="module")
def study_data():
    records, vocab = generate_cohort(GeneratorSpec(n_patients=200, vocab_size=40, seed=2))
    train, valid, test = split_cohort(records, seed=2)
    return StudyData(train, valid, test, len(vocab))


def tiny_space():
    return SearchSpace((
        Dimension("embed_dim", 4, 8, "log2", integer=True),
        Dimension("hidden_size", 4, 8, "log2", integer=True),
        Dimension("lr", 1e-3, 1e-1, "log"),
        Dimension("weight_decay", 1e-8, 1e-4, "log"),
        Dimension("eps", 1e-10, 1e-6, "log"),
    ))


class TestStudy:
    def test_budget_and_ledger(self, study_data, tmp_path):
        path = tmp_path / "ledger.jsonl"
        trials = run_study("GRU", study_data, tiny_space(), budget=4, root_seed=1,
                           families=["Adam", "SGD", "RMSprop"], ledger_path=path, train_cfg={"max_epochs": 2})
        assert len(trials) == 4
        assert [t.family for t in trials] == ["Adam", "Adam", "SGD", "RMSprop"]
        loaded = read_ledger(path)
        assert [t.to_json() for t in loaded] == [t.to_json() for t in trials]
        assert all(0 <= t.valid_auroc <= 1 for t in trials)
        runs = best_so_far(loaded)
        assert all(b >= a for a, b in zip(runs, runs[1:]))

    def test_rerun_is_byte_identical(self, study_data, tmp_path):
        for name in ("a", "b"):
            run_study("LR", study_data, tiny_space(), budget=3, root_seed=5, ledger_path=tmp_path / name,
                      train_cfg={"max_epochs": 2})
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_failed_trial_recorded(self, study_data, monkeypatch):
        def boom(*args, **kwargs):
            raise FloatingPointError("loss went non-finite")

        monkeypatch.setattr("seqbench.optim.train_model", boom)
        trials = run_study("GRU", study_data, tiny_space(), budget=2, families=["Adam"])
        assert [t.status for t in trials] == ["failed", "failed"]
        assert all(t.valid_auroc == 0.0 and "non-finite" in t.error for t in trials)

    def test_selection_by_valid(self):
        ledger = [Trial(0, [0.1], {}, 0.81, 0.90), Trial(1, [0.2], {}, 0.86, 0.70)]
        assert select_best({"GRU": ledger})["GRU"].trial.index == 1

    def test_parallel_matches_serial(self, study_data, tmp_path):
        kwargs = dict(space=tiny_space(), budget=3, root_seed=4, families=["Adam"], train_cfg={"max_epochs": 1})
        run_study("LR", study_data, ledger_path=tmp_path / "s", workers=1, **kwargs)
        run_study("LR", study_data, ledger_path=tmp_path / "p", workers=2, **kwargs)
        serial = [t.to_json() for t in read_ledger(tmp_path / "s")]
        parallel = [t.to_json() for t in read_ledger(tmp_path / "p")]
        # with fewer than 10 trials the suggestion stream is identical regardless of rounds
        assert serial == parallel

    def test_budget_must_be_positive(self, study_data):
        with pytest.raises(ValueError):
            run_study("GRU", study_data, budget=0)
