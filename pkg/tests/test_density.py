import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tutor import density
from tutor.density import (
    GmmModel, KdeModel, MndModel, aic, fit_gmm, fit_gmm_single, fit_kde, fit_mnd, model_from_json, model_to_json,
    sample, score,
)
from tutor.errors import CholeskyFailure, DimensionMismatch

LOG_2PI = math.log(2 * math.pi)


def three_blobs(n, seed):
    rng = np.random.default_rng(seed)
    centers = np.array([[0.0, 0.0], [6.0, 0.0], [0.0, 6.0]])
    lab = rng.integers(0, 3, n)
    return centers[lab] + rng.normal(size=(n, 2)) * np.array([1.0, 0.6])


def naive_gauss(x, mu, cov):
    d = len(mu)
    diff = x - mu
    return math.exp(-0.5 * diff @ np.linalg.inv(cov) @ diff) / math.sqrt((2 * math.pi) ** d * np.linalg.det(cov))


class TestMnd:
    def test_four_point_cloud(self):
        m = fit_mnd(np.array([[0.0, 0], [2, 0], [0, 2], [2, 2]]), ridge=0.0)
        np.testing.assert_allclose(m.mean, [1, 1])
        np.testing.assert_allclose(m.covariance, np.eye(2))

    def test_covariance_matches_double_loop(self):
        X = np.random.default_rng(0).normal(size=(200, 5))
        n, d = X.shape
        mu = [sum(X[i, a] for i in range(n)) / n for a in range(d)]
        cov = np.zeros((d, d))
        for a in range(d):
            for b in range(d):
                cov[a, b] = sum((X[i, a] - mu[a]) * (X[i, b] - mu[b]) for i in range(n)) / n
        np.testing.assert_allclose(fit_mnd(X).covariance, cov, atol=1e-10)

    def test_repeated_row_needs_ridge(self):
        X = np.tile([1.0, 2.0, 3.0], (10, 1))
        with pytest.raises(np.linalg.LinAlgError):
            np.linalg.cholesky(fit_mnd(X).covariance)
        m = fit_mnd(X, ridge=0.0)  # exactly singular: the ridge escalates away from zero
        assert 0 < m.ridge <= density.MAX_RIDGE
        assert np.all(np.abs(m.sample(1000, 0) - m.mean) < 1e-2)

    def test_ridge_escalates(self):
        cov = np.diag([1.0, -5e-6])
        L, r = density._cholesky(cov, 1e-6)
        assert r == pytest.approx(1e-5)
        with pytest.raises(CholeskyFailure):
            density._cholesky(np.diag([1.0, -1.0]), 1e-6)

    def test_near_degenerate_samples_stay_near_mean(self):
        X = np.tile([0.5, -0.5], (5, 1)) + np.random.default_rng(0).normal(size=(5, 2)) * 1e-9
        m = fit_mnd(X, ridge=1e-12)
        assert np.all(np.abs(m.sample(1000, 1) - m.mean) < 1e-3)

    def test_standard_normal_at_mode(self):
        m = MndModel(np.zeros(1), np.eye(1), np.eye(1))
        assert score(m, np.zeros((1, 1))) == pytest.approx(-0.5 * LOG_2PI, abs=1e-12)
        assert score(m, np.zeros((1, 1))) == pytest.approx(-0.9189385, abs=1e-7)

    def test_dimension_mismatch(self):
        m = fit_mnd(np.random.default_rng(0).normal(size=(20, 3)))
        with pytest.raises(DimensionMismatch):
            score(m, np.zeros((2, 4)))

    def test_sample_mean_clt_bound(self):
        X = np.random.default_rng(3).normal(size=(300, 4)) @ np.diag([1.0, 2.0, 0.5, 3.0])
        m = fit_mnd(X)
        s = m.sample(100_000, seed=7)
        bound = 4 * np.sqrt(np.diag(m.covariance)).max() / math.sqrt(100_000)
        assert np.all(np.abs(s.mean(axis=0) - m.mean) < bound)

    def test_deterministic(self):
        m = fit_mnd(np.random.default_rng(0).normal(size=(30, 2)))
        np.testing.assert_array_equal(sample(m, 5, 3), sample(m, 5, 3))

    def test_json_round_trip(self):
        m = fit_mnd(np.random.default_rng(0).normal(size=(30, 3)))
        back = model_from_json(model_to_json(m))
        X = np.random.default_rng(1).normal(size=(10, 3))
        np.testing.assert_array_equal(back.log_density(X), m.log_density(X))


class TestGmm:
    def test_recovers_single_gaussian_mean(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(1000, 2)) * 2.0 + np.array([3.0, -1.0])
        m = fit_gmm(X[:800], X[800:], [1], ["full"], seed=0)
        assert np.all(np.abs(m.means[0] - [3.0, -1.0]) < 3 * 2.0 / math.sqrt(800))

    def test_one_component_equals_mnd(self):
        X = np.random.default_rng(2).normal(size=(150, 4)) @ np.random.default_rng(3).normal(size=(4, 4))
        g = fit_gmm_single(X, 1, "full", seed=0)
        V = np.random.default_rng(4).normal(size=(40, 4))
        assert score(g, V) == pytest.approx(score(fit_mnd(X), V), abs=1e-8)

    @pytest.mark.parametrize("shape", density.SHAPES)
    def test_trace_non_decreasing(self, shape):
        X = three_blobs(300, 1)
        for C in (1, 2, 3, 5):
            tr = np.array(fit_gmm_single(X, C, shape, seed=C).log_likelihood_trace)
            assert np.all(np.diff(tr) >= -1e-8)

    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 10_000), C=st.integers(1, 4), shape=st.sampled_from(density.SHAPES))
    def test_trace_non_decreasing_property(self, seed, C, shape):
        X = np.random.default_rng(seed).normal(size=(60, 3))
        tr = np.array(fit_gmm_single(X, C, shape, seed=seed).log_likelihood_trace)
        assert np.all(np.diff(tr) >= -1e-8)

    @pytest.mark.parametrize("shape", density.SHAPES)
    def test_score_matches_naive_mixture(self, shape):
        X = three_blobs(200, 2)
        m = fit_gmm_single(X, 3, shape, seed=0)
        covs = m.full_covariances()
        V = three_blobs(30, 9)
        naive = sum(
            math.log(sum(m.weights[c] * naive_gauss(x, m.means[c], covs[c]) for c in range(3))) for x in V
        )
        assert score(m, V) == pytest.approx(naive, abs=1e-8)

    def test_forced_mixture_samples_one_component(self):
        m = GmmModel(np.array([1.0, 0.0]), np.array([[0.0, 0.0], [100.0, 100.0]]),
                     np.array([np.eye(2), np.eye(2)]), "full")
        s = m.sample(2000, seed=0)
        assert np.all(np.abs(s) < 10)

    def test_selection_records_grid_and_picks_best(self):
        X = three_blobs(600, 3)
        m = fit_gmm(X[:400], X[400:], [1, 2, 3], ["full", "diag"], seed=0)
        best = max(m.selection, key=lambda r: r[2])
        assert (m.n_components, m.covariance_shape) == best[:2]
        assert score(m, X[400:]) == pytest.approx(best[2])

    def test_restart_kept_by_train_likelihood(self):
        X = three_blobs(300, 5)
        m = fit_gmm(X[:200], X[200:], [4], ["full"], seed=2, restarts=3)
        fits = [fit_gmm_single(X[:200], 4, "full", seed=2, restart=r) for r in range(3)]
        best = max(fits, key=lambda f: score(f, X[:200]))
        np.testing.assert_array_equal(m.means, best.means)

    def test_parameter_count(self):
        m = fit_gmm_single(np.random.default_rng(0).normal(size=(50, 2)), 1, "full")
        assert m.n_parameters() == 5

    def test_aic_grows_with_parameters(self):
        X = three_blobs(100, 0)
        full = fit_gmm_single(X, 2, "full")
        same_ll = GmmModel(full.weights, full.means, full.covariances, "full")
        assert aic(same_ll, X) == pytest.approx(2 * 11 - 2 * score(full, X))
        assert aic(same_ll, X) > 2 * 5 - 2 * score(full, X)

    def test_aic_minimum_near_three(self):
        X = three_blobs(900, 5)
        curve = {C: aic(fit_gmm_single(X, C, "diag", seed=1), X) for C in range(1, 7)}
        assert min(curve, key=curve.get) in (3, 4)

    def test_all_shapes_sample_and_serialize(self):
        X = three_blobs(120, 6)
        for shape in density.SHAPES:
            m = fit_gmm_single(X, 2, shape, seed=0)
            back = model_from_json(model_to_json(m))
            np.testing.assert_array_equal(back.log_density(X), m.log_density(X))
            assert sample(m, 50, 0).shape == (50, 2)


class TestKde:
    def test_peak_value(self):
        for d in (1, 3):
            k = KdeModel(np.zeros((1, d)), 1.0)
            assert k.log_density(np.zeros((1, d)))[0] == pytest.approx(-d / 2 * LOG_2PI, abs=1e-12)

    def test_single_candidate(self):
        X = np.random.default_rng(0).normal(size=(30, 2))
        assert fit_kde(X, X[:5] + 0.1, [0.37]).bandwidth == 0.37

    def test_selected_bandwidth_matches_brute_force(self):
        rng = np.random.default_rng(1)
        X, V = rng.normal(size=(80, 2)), rng.normal(size=(40, 2))
        grid = [0.05, 0.1, 0.2, 0.4, 0.8, 1.6]

        def naive(h):
            tot = 0.0
            for v in V:
                k = sum(math.exp(-((v - x) @ (v - x)) / (2 * h * h)) for x in X)
                tot += math.log(k / (len(X) * (2 * math.pi * h * h)))
            return tot

        assert fit_kde(X, V, grid).bandwidth == max(grid, key=naive)

    def test_order_invariance(self):
        rng = np.random.default_rng(2)
        X, V = rng.normal(size=(50, 3)), rng.normal(size=(10, 3))
        a = KdeModel(X, 0.5).log_density(V)
        b = KdeModel(X[::-1].copy(), 0.5).log_density(V)
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_sample_shape_and_determinism(self):
        k = KdeModel(np.random.default_rng(0).normal(size=(10, 2)), 0.3)
        np.testing.assert_array_equal(k.sample(20, 4), k.sample(20, 4))

    def test_sample_rejects_zero_count(self):
        with pytest.raises(ValueError):
            sample(KdeModel(np.zeros((1, 1)), 1.0), 0, 0)
