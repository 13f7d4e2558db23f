"""
Unit tests for the exact GP surrogate.
"""

import numpy as np
import pandas as pd
import pytest

from fedbatch_bo.dynamics import NOMINAL_RECIPE, Recipe
from fedbatch_bo.errors import FitFailed, InvalidParameters
from fedbatch_bo.gp_surrogate import (
    GpHyperparams,
    RecipeInputScaler,
    _cholesky_with_jitter,
    condition,
    dump_csv,
    fit,
    fit_with_report,
    gram,
    log_marginal_likelihood,
    posterior,
    rbf_kernel,
)


class TestKernel:
    """Test cases for the ARD RBF kernel."""

    def test_identity(self):
        """Test that k(a, a) equals the signal variance."""
        hyper = GpHyperparams(lengthscales=(0.3, 2.0), signal_variance=1.7)
        assert rbf_kernel([0.2, 0.4], [0.2, 0.4], hyper) == pytest.approx(1.7)

    def test_symmetry(self, rng):
        """Test k(a, b) = k(b, a) on random pairs."""
        hyper = GpHyperparams(lengthscales=(0.3, 0.7, 1.1))
        for _ in range(20):
            a, b = rng.uniform(size=3), rng.uniform(size=3)
            assert rbf_kernel(a, b, hyper) == rbf_kernel(b, a, hyper)

    def test_hand_value(self):
        """Test unit lengthscales, unit signal and |a-b|^2 = 2 gives e^-1."""
        hyper = GpHyperparams(lengthscales=(1.0, 1.0), signal_variance=1.0)
        assert rbf_kernel([0.0, 0.0], [1.0, 1.0], hyper) == pytest.approx(np.exp(-1.0), rel=1e-12)

    def test_gram_matches_pairwise(self, rng):
        """Test that the Gram matrix agrees with pairwise kernel evaluations."""
        hyper = GpHyperparams(lengthscales=(0.5, 0.2))
        A, B = rng.uniform(size=(4, 2)), rng.uniform(size=(3, 2))
        K = gram(A, B, hyper)
        for i in range(4):
            for j in range(3):
                assert K[i, j] == pytest.approx(rbf_kernel(A[i], B[j], hyper), rel=1e-12)

    def test_dimension_mismatch(self):
        """Test that inputs of the wrong length raise."""
        with pytest.raises(InvalidParameters):
            rbf_kernel([0.0], [0.0, 1.0], GpHyperparams(lengthscales=(1.0, 1.0)))


class TestPosterior:
    """Test cases for the conditioned GP."""

    def test_interpolates_training_data(self, data):
        """Test that noise-free data is interpolated within 1e-6."""
        X, y = data
        model = condition(X, y, GpHyperparams(lengthscales=(0.3, 0.3), noise_variance=0.0))
        for x, target in zip(X, y):
            mean, _ = posterior(model, x)
            assert mean == pytest.approx(target, abs=1e-6)

    def test_reverts_to_prior_far_away(self, data):
        """Test that far-field queries give the data mean and the signal variance."""
        X, y = data
        hyper = GpHyperparams(lengthscales=(0.3, 0.3), signal_variance=2.0, noise_variance=1e-6)
        model = condition(X, y, hyper)
        mean, variance = posterior(model, [50.0, 50.0])
        assert mean == pytest.approx(np.mean(y), abs=1e-6)
        assert variance == pytest.approx(2.0, abs=1e-6)

    def test_variance_ordering(self, data):
        """Test that variance at a training point is below variance far away."""
        X, y = data
        model = condition(X, y, GpHyperparams(lengthscales=(0.3, 0.3), noise_variance=1e-6))
        _, near = posterior(model, X[0])
        _, far = posterior(model, [10.0, 10.0])
        assert 0.0 <= near <= far

    def test_mean_linear_in_y(self, data):
        """Test that scaling centred y scales the posterior mean."""
        X, y = data
        yc = y - y.mean()
        hyper = GpHyperparams(lengthscales=(0.4, 0.4), noise_variance=1e-4)
        query = np.array([0.33, 0.71])
        base, _ = posterior(condition(X, yc, hyper), query)
        scaled, _ = posterior(condition(X, 3.5 * yc, hyper), query)
        assert scaled == pytest.approx(3.5 * base, rel=1e-9, abs=1e-12)

    def test_new_observation_never_increases_variance(self, data, rng):
        """Test that adding a point does not increase variance at any query."""
        X, y = data
        hyper = GpHyperparams(lengthscales=(0.3, 0.3), noise_variance=1e-6)
        before = condition(X[:-1], y[:-1], hyper)
        after = condition(X, y, hyper)
        queries = rng.uniform(size=(25, 2))
        _, var_before = before.posterior_batch(queries)
        _, var_after = after.posterior_batch(queries)
        assert np.all(var_after <= var_before + 1e-12)

    def test_empty_data_rejected(self):
        """Test that conditioning on nothing raises."""
        with pytest.raises(InvalidParameters):
            condition(np.zeros((0, 2)), np.zeros(0), GpHyperparams(lengthscales=(1.0, 1.0)))

    def test_non_pd_kernel_raises(self):
        """Test that a matrix no jitter can fix raises FitFailed."""
        with pytest.raises(FitFailed):
            _cholesky_with_jitter(-np.eye(3), 1.0)


class TestLogMarginalLikelihood:
    """Test cases for the marginal likelihood and its gradient."""

    def test_gradient_matches_finite_differences(self, data):
        """Test analytic gradients against central differences."""
        X, y = data
        yc = y - y.mean()
        theta = np.log(np.array([0.4, 0.25, 1.3, 0.05]))
        _, grad = log_marginal_likelihood(theta, X, yc, eval_gradient=True)
        eps = 1e-6
        fd = np.empty_like(theta)
        for i in range(len(theta)):
            step = np.zeros_like(theta)
            step[i] = eps
            fd[i] = (log_marginal_likelihood(theta + step, X, yc) - log_marginal_likelihood(theta - step, X, yc)) / (2 * eps)
        np.testing.assert_allclose(grad, fd, rtol=1e-4, atol=1e-7)

    def test_model_reports_same_value(self, data):
        """Test that GpModel.log_marginal_likelihood matches the function."""
        X, y = data
        hyper = GpHyperparams(lengthscales=(0.4, 0.25), signal_variance=1.3, noise_variance=0.05)
        model = condition(X, y, hyper)
        assert model.log_marginal_likelihood() == pytest.approx(
            log_marginal_likelihood(hyper.to_log(), X, y - y.mean()))


class TestFit:
    """Test cases for hyperparameter fitting."""

    def test_refit_is_fixed_point(self, data):
        """Test that refitting from the optimum does not lower the likelihood."""
        X, y = data
        model = fit(X, y, restarts=3, rng=np.random.default_rng(0))
        refit = fit(X, y, init=model.hyper, restarts=1)
        assert refit.log_marginal_likelihood() >= model.log_marginal_likelihood() - 1e-8

    def test_every_restart_improves(self, data):
        """Test that each restart ends no worse than it started."""
        X, y = data
        _, report = fit_with_report(X, y, restarts=4, rng=np.random.default_rng(1))
        assert len(report.start_lml) == 4
        for start, end in zip(report.start_lml, report.end_lml):
            assert end >= start

    def test_recovers_lengthscale(self):
        """Test that data drawn with lengthscale 0.3 is fitted within a factor of 2."""
        rng = np.random.default_rng(42)
        X = np.sort(rng.uniform(0.0, 3.0, size=(64, 1)), axis=0)
        K = gram(X, X, GpHyperparams(lengthscales=(0.3,))) + 1e-4 * np.eye(64)
        y = np.linalg.cholesky(K) @ rng.standard_normal(64)
        model = fit(X, y, restarts=5, rng=np.random.default_rng(0))
        assert 0.15 <= model.hyper.lengthscales[0] <= 0.6

    def test_needs_two_points(self):
        """Test that a single point cannot be fitted."""
        with pytest.raises(InvalidParameters):
            fit(np.zeros((1, 2)), np.zeros(1))

    def test_deterministic(self, data):
        """Test that a seeded fit is reproducible."""
        X, y = data
        a = fit(X, y, restarts=3, rng=np.random.default_rng(5))
        b = fit(X, y, restarts=3, rng=np.random.default_rng(5))
        assert a.hyper == b.hyper


class TestInputScaler:
    """Test cases for recipe input normalisation."""

    def test_bounds_map_to_unit_box(self):
        """Test that the recipe bounds map onto 0 and 1."""
        scaler = RecipeInputScaler.default(150.0)
        low = scaler.recipe_input(Recipe(B0=1.0, P0=0.0, S0=0.0, V0=5.0, F=0.0, t_stop=150.0), t=0.0)
        high = scaler.recipe_input(Recipe(B0=5.0, P0=3.0, S0=10.0, V0=8.5, F=50.0, t_stop=150.0))
        np.testing.assert_allclose(low, 0.0)
        np.testing.assert_allclose(high, 1.0)

    def test_inverse(self):
        """Test that inverse undoes transform."""
        scaler = RecipeInputScaler.default()
        unit = scaler.recipe_input(NOMINAL_RECIPE, t=40.0)
        np.testing.assert_allclose(scaler.inverse(unit), [1.5, 0.0, 0.0, 7.0, 25.0, 40.0])


class TestDump:
    """Test cases for the debug CSV dump."""

    def test_dump_columns(self, tmp_path):
        """Test that the dump holds inputs, raw y and hyperparameters."""
        X = np.random.default_rng(0).uniform(size=(5, 6))
        y = np.arange(5.0)
        model = condition(X, y, GpHyperparams(lengthscales=(0.5,) * 6, noise_variance=1e-4))
        frame = pd.read_csv(dump_csv(model, tmp_path / "gp.csv"))
        assert list(frame.columns[:7]) == ["B0", "P0", "S0", "V0", "F", "t", "y"]
        np.testing.assert_allclose(frame["y"], y)
        assert "lengthscale_F" in frame.columns


@pytest.fixture
def rng():
    """Seeded numpy generator."""
    return np.random.default_rng(7)


@pytest.fixture
def data():
    """Small 2-D regression set."""
    rng = np.random.default_rng(11)
    X = rng.uniform(size=(12, 2))
    y = np.sin(4.0 * X[:, 0]) + np.cos(3.0 * X[:, 1])
    return X, y
