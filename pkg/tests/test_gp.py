import numpy as np
import pytest

import bico
from bico.errors import NumericError
from bico.gp import (
    GpHyperparams,
    JointPoint,
    SimulationDataset,
    _chol_with_jitter,
    default_hyperparam_bounds,
    fit,
    fit_hyperparameters,
    kernel_eval,
    kernel_matrix,
    log_marginal_likelihood,
    posterior_cov,
    posterior_mean,
    posterior_var,
    predictive_y_params,
    sigma_tilde,
)
from tests.conftest import make_dataset

H = GpHyperparams(1.0, 10.0, 0.01)


def dense_mean_cov(dataset, h, p, q, offset=0.0):
    """Independent oracle: direct dense solve of the posterior equations."""
    x = dataset.joint_matrix()
    y = dataset.y_array() - offset
    k = kernel_matrix(x, x, h) + h.noise_sq * np.eye(len(dataset))
    kinv = np.linalg.inv(k)
    kp = kernel_matrix(p, x, h)[0]
    kq = kernel_matrix(q, x, h)[0]
    mean = offset + kp @ kinv @ y
    cov = kernel_matrix(p, q, h)[0, 0] - kp @ kinv @ kq
    return float(mean), float(cov)


class TestKernel:
    def test_zero_distance(self):
        p = JointPoint([3.0], [4.0])
        assert kernel_eval(p, p, H) == 1.0

    def test_monotone_decay_to_zero(self):
        p = JointPoint([0.0], [0.0])
        vals = [kernel_eval(p, JointPoint([d], [0.0]), H) for d in (10, 100, 1000, 1e6)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))
        assert vals[0] > vals[1]
        assert vals[-1] == 0.0

    def test_closed_form_value(self):
        p = JointPoint([0.0], [0.0])
        q = JointPoint([10.0], [0.0])
        assert kernel_eval(p, q, H) == pytest.approx(np.exp(-0.5), abs=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            kernel_matrix(np.zeros((2, 2)), np.zeros((2, 3)), H)

    def test_per_dimension_lengthscales(self):
        h = GpHyperparams(2.0, [1.0, 100.0], 0.0)
        p, q = JointPoint([1.0], [0.0]), JointPoint([0.0], [0.0])
        assert kernel_eval(p, q, h) == pytest.approx(2.0 * np.exp(-0.5), rel=1e-12)

    def test_hyper_validation(self):
        with pytest.raises(ValueError):
            GpHyperparams(0.0, 1.0)
        with pytest.raises(ValueError):
            GpHyperparams(1.0, -1.0)
        with pytest.raises(ValueError):
            GpHyperparams(1.0, 1.0, -0.1)


class TestFitAndPredict:
    def test_single_record_noiseless_interpolation(self):
        d = SimulationDataset(1, 1)
        d.append(JointPoint([5.0], [5.0]), 2.5)
        g = fit(d, GpHyperparams(1.0, 10.0, 0.0))
        assert posterior_mean(g, np.array([5.0, 5.0])) == pytest.approx(2.5, abs=1e-9)

    def test_variance_never_exceeds_prior(self, rng):
        d = make_dataset(rng, 6)
        g = fit(d, H)
        for _ in range(20):
            p = rng.uniform(0, 100, size=2)
            assert posterior_var(g, p) <= H.sigma0_sq + 1e-9

    def test_mean_cov_match_dense_oracle(self, rng):
        d = make_dataset(rng, 5)
        g = fit(d, H, mean_offset=0.0)
        for _ in range(10):
            p = rng.uniform(0, 100, size=2)
            q = rng.uniform(0, 100, size=2)
            mean_o, cov_o = dense_mean_cov(d, H, p, q)
            assert posterior_mean(g, p) == pytest.approx(mean_o, abs=1e-8)
            assert posterior_cov(g, p, q) == pytest.approx(cov_o, abs=1e-8)

    def test_default_offset_is_output_mean(self, rng):
        d = make_dataset(rng, 4, fn=lambda row: 7.0)
        g = fit(d, H)
        far = np.array([1e6, 1e6])
        assert posterior_mean(g, far) == pytest.approx(7.0, abs=1e-12)

    def test_zero_prior_mean_far_from_data(self, rng):
        d = make_dataset(rng, 4)
        g = fit(d, H, mean_offset=0.0)
        assert posterior_mean(g, np.array([1e6, 1e6])) == pytest.approx(0.0, abs=1e-12)

    def test_prior_cov_without_data(self):
        d = SimulationDataset(1, 1)
        g = fit(d, H)
        p, q = np.array([1.0, 2.0]), np.array([4.0, 2.0])
        assert posterior_cov(g, p, q) == pytest.approx(
            kernel_eval(JointPoint([1.0], [2.0]), JointPoint([4.0], [2.0]), H)
        )

    def test_zero_variance_at_noiseless_training_point(self, rng):
        d = make_dataset(rng, 5)
        g = fit(d, GpHyperparams(1.0, 10.0, 0.0))
        p = d.points[2].joint
        assert posterior_cov(g, p, p) <= 1e-8
        assert posterior_var(g, p) <= 1e-8

    def test_cov_symmetry(self, rng):
        d = make_dataset(rng, 6)
        g = fit(d, H)
        p = rng.uniform(0, 100, size=2)
        q = rng.uniform(0, 100, size=2)
        assert posterior_cov(g, p, q) == pytest.approx(posterior_cov(g, q, p), abs=1e-10)

    def test_posterior_interpolation_invariant(self, rng):
        d = make_dataset(rng, 8)
        g = fit(d, GpHyperparams(1.0, 10.0, 0.0))
        for pt, y in zip(d.points, d.y_array()):
            assert abs(posterior_mean(g, pt.joint) - y) <= 1e-6

    def test_variance_monotone_in_data(self, rng):
        d = make_dataset(rng, 6)
        g_small = fit(d, H)
        d2 = d.copy()
        d2.append(JointPoint([44.0], [55.0]), 0.3)
        g_big = fit(d2, H)
        probes = rng.uniform(0, 100, size=(50, 2))
        assert (posterior_var(g_big, probes) <= posterior_var(g_small, probes) + 1e-8).all()

    def test_gram_symmetric_psd(self, rng):
        pts = rng.uniform(0, 100, size=(12, 2))
        k = kernel_matrix(pts, pts, H)
        assert np.allclose(k, k.T)
        assert np.linalg.eigvalsh(k).min() >= -1e-8

    def test_non_pd_raises_numeric_error(self):
        with pytest.raises(NumericError):
            _chol_with_jitter(np.array([[1.0, 2.0], [2.0, 1.0]]), 1e-9)


class TestPredictiveY:
    def test_prior_params(self):
        g = fit(SimulationDataset(1, 1), GpHyperparams(1.0, 10.0, 0.01))
        mean, var = predictive_y_params(g, np.array([3.0, 4.0]))
        assert (mean, var) == (0.0, pytest.approx(1.01))

    def test_variance_at_least_noise(self, rng):
        d = make_dataset(rng, 7)
        g = fit(d, H)
        for _ in range(20):
            _, var = predictive_y_params(g, rng.uniform(0, 100, size=2))
            assert var >= H.noise_sq

    def test_matches_dense_oracle(self, rng):
        d = make_dataset(rng, 5)
        g = fit(d, H, mean_offset=0.0)
        p = rng.uniform(0, 100, size=2)
        mean_o, cov_o = dense_mean_cov(d, H, p, p)
        mean, var = predictive_y_params(g, p)
        assert mean == pytest.approx(mean_o, abs=1e-8)
        assert var == pytest.approx(cov_o + H.noise_sq, abs=1e-8)


class TestSigmaTilde:
    def test_prior_case(self):
        g = fit(SimulationDataset(1, 1), GpHyperparams(1.0, 10.0, 0.01))
        p = np.array([5.0, 5.0])
        expected = 1.0 / np.sqrt(1.01)
        assert sigma_tilde(g, p, p) == pytest.approx(expected, rel=1e-12)

    def test_far_point_negligible(self, rng):
        d = make_dataset(rng, 5)
        g = fit(d, H)
        assert abs(sigma_tilde(g, np.array([0.0, 0.0]), np.array([1e5, 1e5]))) < 1e-12

    def test_noiseless_duplicate_returns_zero(self, rng):
        d = make_dataset(rng, 5)
        g = fit(d, GpHyperparams(1.0, 10.0, 0.0))
        dup = d.points[1].joint
        assert sigma_tilde(g, rng.uniform(0, 100, size=2), dup) == 0.0

    def test_refit_update_identity(self, rng):
        # mu^{n+1}(p) - mu^n(p) == sigma_tilde(p, next) * z for the implied z
        for _ in range(100):
            d = make_dataset(rng, 5)
            g = fit(d, H)
            p = rng.uniform(0, 100, size=2)
            nxt = rng.uniform(0, 100, size=2)
            y_new = rng.normal()
            mean_next, var_y = predictive_y_params(g, nxt)
            z = (y_new - mean_next) / np.sqrt(var_y)
            d2 = d.copy()
            d2.append(JointPoint(nxt[:1], nxt[1:]), y_new)
            g2 = fit(d2, H, mean_offset=g.mean_offset)
            lhs = posterior_mean(g2, p) - posterior_mean(g, p)
            rhs = sigma_tilde(g, p, nxt) * z
            assert lhs == pytest.approx(rhs, abs=1e-8)


class TestMarginalLikelihood:
    def test_single_standard_record(self):
        d = SimulationDataset(1, 1)
        d.append(JointPoint([0.0], [0.0]), 0.0)
        val = log_marginal_likelihood(d, GpHyperparams(0.99, 10.0, 0.01))
        assert val == pytest.approx(-0.5 * np.log(2 * np.pi), abs=1e-12)

    def test_permutation_invariance(self, rng):
        d = make_dataset(rng, 6)
        rows = list(zip(d.points, d.y_array()))
        perm = [rows[i] for i in rng.permutation(len(rows))]
        d2 = SimulationDataset(1, 1)
        for pt, y in perm:
            d2.append(pt, y)
        assert log_marginal_likelihood(d, H) == pytest.approx(
            log_marginal_likelihood(d2, H), abs=1e-9
        )

    def test_against_dense_determinant_oracle(self, rng):
        d = make_dataset(rng, 3)
        y = d.y_array()
        x = d.joint_matrix()
        k = kernel_matrix(x, x, H) + H.noise_sq * np.eye(3)
        expected = (
            -0.5 * y @ np.linalg.solve(k, y)
            - 0.5 * np.linalg.slogdet(k)[1]
            - 1.5 * np.log(2 * np.pi)
        )
        assert log_marginal_likelihood(d, H, mean_offset=0.0) == pytest.approx(expected, abs=1e-8)

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            log_marginal_likelihood(SimulationDataset(1, 1), H)


class TestFitHyperparameters:
    def _draw_from_prior(self, rng, n, h):
        x = rng.uniform(0, 100, size=(n, 2))
        k = kernel_matrix(x, x, h) + h.noise_sq * np.eye(n)
        y = np.linalg.cholesky(k) @ rng.standard_normal(n)
        return SimulationDataset.from_arrays(x, y, 1)

    def test_recovers_lengthscale_within_factor_two(self):
        rng = np.random.default_rng(2024)
        truth = GpHyperparams(1.0, 10.0, 0.01)
        d = self._draw_from_prior(rng, 40, truth)
        h = fit_hyperparameters(d, restarts=10, rng=rng)
        ls = float(np.atleast_1d(h.lengthscale)[0])
        assert 5.0 <= ls <= 20.0

    def test_within_bounds(self, rng):
        d = make_dataset(rng, 12, noise=0.1)
        bounds = default_hyperparam_bounds(d)
        h = fit_hyperparameters(d, bounds=bounds, restarts=4, rng=rng)
        assert bounds.sigma0_sq[0] <= h.sigma0_sq <= bounds.sigma0_sq[1]
        ls = float(np.atleast_1d(h.lengthscale)[0])
        assert bounds.lengthscale[0, 0] <= ls <= bounds.lengthscale[0, 1]
        assert bounds.noise_sq[0] <= h.noise_sq <= bounds.noise_sq[1]

    def test_beats_search_seed_points(self, rng):
        d = make_dataset(rng, 10, noise=0.1)
        bounds = default_hyperparam_bounds(d)
        h = fit_hyperparameters(d, bounds=bounds, restarts=4, rng=rng)
        best = log_marginal_likelihood(d, h)
        mid = GpHyperparams(
            np.sqrt(bounds.sigma0_sq[0] * bounds.sigma0_sq[1]),
            np.sqrt(bounds.lengthscale[0, 0] * bounds.lengthscale[0, 1]),
            np.sqrt(bounds.noise_sq[0] * bounds.noise_sq[1]),
        )
        assert best >= log_marginal_likelihood(d, mid) - 1e-9

    def test_ard_mode_returns_per_dimension(self, rng):
        d = make_dataset(rng, 10, noise=0.1)
        h = fit_hyperparameters(d, restarts=3, rng=rng, shared_lengthscale=False)
        assert np.atleast_1d(h.lengthscale).size == 2

    def test_fixed_noise_respected(self, rng):
        d = make_dataset(rng, 8, noise=0.1)
        h = fit_hyperparameters(d, restarts=3, rng=rng, fixed_noise_sq=0.25)
        assert h.noise_sq == 0.25


class TestFitHyperparametersFallback:
    def test_all_starts_failing_warns_and_returns_midpoint(self, rng, monkeypatch):
        import bico.gp as gpmod

        d = make_dataset(rng, 6, noise=0.1)
        bounds = default_hyperparam_bounds(d)

        class AlwaysFail:
            def __init__(self, *a, **k):
                pass

            def __call__(self, *a, **k):
                raise NumericError("forced")

        monkeypatch.setattr(gpmod, "_FastLml", AlwaysFail)
        with pytest.warns(UserWarning, match="midpoint"):
            h = fit_hyperparameters(d, bounds=bounds, restarts=2, rng=rng)
        assert h.sigma0_sq == pytest.approx(
            np.sqrt(bounds.sigma0_sq[0] * bounds.sigma0_sq[1]), rel=1e-9
        )
