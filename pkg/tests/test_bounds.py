import numpy as np
import pytest

from xcpipe import synth_dataset
from xcpipe.bounds import (
    check_cosine_bounds,
    check_feature_bound,
    check_intermediate_bounds,
    check_model_bounds,
    cosine_slack,
    make_equality_residual,
    random_constrained_matrix,
    run_randomized_suite,
    shortlist_overlap_vs_lambda,
    spectral_norm_oracle,
)
from xcpipe.errors import BoundViolated, InvalidParam
from xcpipe.nn import relu
from xcpipe.shortlist import RouteCaps
from xcpipe.surrogate import init_embeddings


class TestFeatureBound:
    def test_zero_residual_full_margin(self, rng):
        v = rng.uniform(0, 1, size=(20, 6))
        rep = check_feature_bound(np.zeros((6, 6)), 0.5, v)
        norms = np.linalg.norm(v, axis=1)
        assert rep["min_margin"] == pytest.approx(0.5 * norms.min())

    def test_zero_vector_zero_both_sides(self):
        rep = check_feature_bound(np.zeros((4, 4)), 0.3, np.zeros((3, 4)))
        assert rep["min_margin"] == 0.0

    def test_budget_gate_raises(self, rng):
        r = rng.standard_normal((5, 5))
        r *= 2.0 / spectral_norm_oracle(r)         # sigma = 2 > lam
        with pytest.raises(BoundViolated) as exc:
            check_feature_bound(r, 0.5, rng.uniform(0, 1, size=(4, 5)))
        assert exc.value.name == "spectral_budget"

    def test_equality_witness_attains_bound(self, rng):
        for _ in range(1000):
            lam = float(rng.choice([0.1, 0.3, 0.5, 1.0]))
            v = rng.uniform(0.1, 1.0, size=6)
            r = make_equality_residual(v, lam)
            assert spectral_norm_oracle(r) == pytest.approx(lam, abs=1e-12)
            xhat = v + relu(r @ v)
            drift = np.linalg.norm(xhat - v)
            assert drift == pytest.approx(lam * np.linalg.norm(v), abs=1e-9)

    def test_witness_requires_nonzero(self):
        with pytest.raises(InvalidParam):
            make_equality_residual(np.zeros(4), 0.5)


class TestCosineBounds:
    def test_zero_budget_pinches_equal(self, rng):
        v = rng.uniform(0, 1, size=(30, 5))
        rep = check_cosine_bounds(np.zeros((5, 5)), 0.0, v,
                                  [np.arange(10), np.arange(10, 30)])
        assert cosine_slack(0.0, 5) == 0.0
        # eps = 0 pinches both margins to zero
        assert rep["min_lower_margin"] == pytest.approx(0.0, abs=1e-12)
        assert rep["min_upper_margin"] == pytest.approx(0.0, abs=1e-12)

    def test_single_positive_small_budget(self, rng):
        lam = 0.1
        assert cosine_slack(lam, 1) == pytest.approx(0.21)
        for _ in range(200):
            v = rng.uniform(0, 1, size=(1, 6))
            r = random_constrained_matrix(6, lam, rng)
            check_cosine_bounds(r, lam, v, [np.asarray([0])])

    def test_nonnegativity_precondition(self, rng):
        v = rng.standard_normal((5, 4))       # signed: violates the pre
        with pytest.raises(InvalidParam):
            check_cosine_bounds(np.zeros((4, 4)), 0.5, v, [np.arange(5)])

    def test_randomized_falsification(self, rng):
        """Random draws with the budget held: no violations ever."""
        for t in range(500):
            lam = float(rng.choice([0.1, 0.3, 0.5, 1.0]))
            n = int(rng.integers(1, 9))
            v = rng.uniform(0, 1, size=(n, 7))
            r = random_constrained_matrix(7, lam, rng, at_budget=(t % 2 == 0))
            check_cosine_bounds(r, lam, v, [np.arange(n)])


class TestIntermediateBounds:
    def test_zero_budget_zero_gaps(self, rng):
        v = rng.uniform(0, 1, size=(10, 4))
        rep = check_intermediate_bounds(np.zeros((4, 4)), 0.0, v,
                                        [np.arange(10)])
        assert rep["min_feature_norm_margin"] >= 0.0
        assert rep["min_mean_drift_margin"] == pytest.approx(0.0, abs=1e-12)

    def test_randomized(self, rng):
        for _ in range(500):
            lam = float(rng.choice([0.1, 0.5, 1.0]))
            n = int(rng.integers(1, 8))
            v = rng.uniform(0, 1, size=(n, 5))
            r = random_constrained_matrix(5, lam, rng)
            check_intermediate_bounds(r, lam, v, [np.arange(n)])


class TestRandomizedSuite:
    def test_small_run_clean(self):
        rep = run_randomized_suite(2000, dim=6, max_pos=6, seed=3)
        assert rep["violations"] == 0
        assert rep["equality_witnesses_tight"] == 200
        for margin in rep["min_margins"].values():
            assert margin is None or margin >= -1e-9

    def test_rows_emitted(self):
        rep = run_randomized_suite(50, dim=4, seed=1)
        assert len(rep["rows"]) == 50
        assert {"lam", "n_pos", "eps", "feature_margin"} <= set(
            rep["rows"][0])


class TestModelBounds:
    def test_trained_model_clean(self, planted_small):
        bank = init_embeddings(planted_small.num_features, 12, None,
                               seed_or_rng=0)
        rng = np.random.default_rng(5)
        r = random_constrained_matrix(12, 0.5, rng)
        rep = check_model_bounds(bank, r, 0.5, planted_small)
        assert rep["feature"]["violations"] == 0
        assert rep["cosine"]["violations"] == 0
        assert rep["intermediate"]["violations"] == 0


class TestOverlapCurve:
    def test_curve_shape_and_zero_lambda(self, planted_small):
        bank = init_embeddings(planted_small.num_features, 16, None,
                               seed_or_rng=2)
        lambdas = [0.0, 0.1, 0.3, 0.5, 1.0]
        curve = shortlist_overlap_vs_lambda(
            planted_small, bank, lambdas, RouteCaps(8, 8, 0),
            anns_params=(8, 60, 60), train_epochs=2, seed=4)
        assert [row["lam"] for row in curve] == lambdas
        assert curve[0]["mean_jaccard"] == 1.0
        # non-increasing within the 2% noise allowance
        for a, b in zip(curve, curve[1:]):
            assert b["mean_jaccard"] <= a["mean_jaccard"] + 0.02
        assert curve[-1]["mean_jaccard"] <= curve[1]["mean_jaccard"] + 0.02
