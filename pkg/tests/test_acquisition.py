"""
Unit tests for acquisition functions, search spaces and the optimiser.
"""

from types import SimpleNamespace

import numpy as np
import pytest
import torch

from fedbatch_bo.acquisition import (
    RecipeSpace,
    ReoptimisationSpace,
    ScheduleCandidate,
    ScheduleSpace,
    check_schedule,
    expected_improvement,
    improvement_from_states,
    mc_acquisition,
    mc_acquisition_batch,
    optimize_acquisition,
    schedule_from_unit,
)
from fedbatch_bo.dynamics import RECIPE_BOUNDS, Recipe, profit
from fedbatch_bo.errors import InfeasibleSearch, InvalidParameters
from fedbatch_bo.sanodep import SanodepConfig, SanodepModel, StateScaler


class TestExpectedImprovement:
    """Test cases for closed-form EI."""

    def test_standard_value(self):
        """Test mu = 1, sigma = 1, g = 0 against the tabulated value."""
        assert expected_improvement(1.0, 1.0, 0.0) == pytest.approx(1.08332, abs=1e-5)

    def test_zero_std(self):
        """Test that sigma = 0 reduces to max(mu - g, 0)."""
        assert expected_improvement(2.0, 0.0, 1.0) == 1.0
        assert expected_improvement(0.0, 0.0, 1.0) == 0.0

    def test_monotone(self):
        """Test that EI grows with the mean and with the standard deviation."""
        means = np.linspace(-2.0, 2.0, 9)
        assert np.all(np.diff(expected_improvement(means, np.ones(9), 0.0)) > 0)
        stds = np.linspace(0.1, 3.0, 9)
        assert np.all(np.diff(expected_improvement(np.zeros(9), stds, 0.5)) > 0)

    def test_matches_monte_carlo(self):
        """Test the closed form against a large sample average."""
        rng = np.random.default_rng(0)
        y = 0.3 + 1.7 * rng.standard_normal(1_000_000)
        mc = np.maximum(y - 0.8, 0.0).mean()
        assert expected_improvement(0.3, 1.7, 0.8) == pytest.approx(mc, abs=1e-2)

    def test_never_negative(self):
        """Test that EI is non-negative far below the incumbent."""
        assert expected_improvement(-50.0, 0.1, 0.0) >= 0.0

    def test_negative_std_rejected(self):
        """Test that a negative standard deviation raises."""
        with pytest.raises(InvalidParameters):
            expected_improvement(0.0, -1.0, 0.0)


class TestSchedules:
    """Test cases for measurement-schedule feasibility."""

    @pytest.mark.parametrize("times, expected", [
        ((), True),
        ((10.0, 20.0), True),
        ((5.0, 35.0), True),
        ((3.0,), False),
        ((10.0, 12.0), False),
        ((36.0,), False),
        ((5.0, 10.0, 15.0, 20.0, 25.0), False),
    ])
    def test_check_schedule(self, times, expected):
        """Test start gap, spacing, end gap and the measurement cap at t_stop = 40."""
        assert check_schedule(times, 40.0, min_gap=5.0, max_measurements=4) is expected

    def test_unit_mapping_always_feasible(self, rng):
        """Test that any weights decode to a feasible schedule."""
        for _ in range(200):
            t_stop = rng.uniform(1.0, 150.0)
            start = rng.uniform(0.0, t_stop)
            times = schedule_from_unit(rng.random(4), start, t_stop, min_gap=5.0, max_measurements=4)
            assert check_schedule(times, t_stop, start=start, min_gap=5.0, max_measurements=4)

    def test_no_room(self):
        """Test that a short batch gets no intermediate measurements."""
        assert schedule_from_unit([0.5, 0.5], 0.0, 9.0, min_gap=5.0) == ()

    def test_uses_as_many_measurements_as_fit(self):
        """Test the number of times placed in [5, 7] for t_stop = 12."""
        times = schedule_from_unit([1.0, 1.0, 1.0, 1.0], 0.0, 12.0, min_gap=5.0)
        assert len(times) == 1
        assert 5.0 <= times[0] <= 7.0

    def test_candidate_observation_times(self):
        """Test that t_stop is appended as the last observation."""
        candidate = ScheduleCandidate(Recipe(t_stop=60.0), (10, 30))
        np.testing.assert_array_equal(candidate.observation_times(), [10.0, 30.0, 60.0])
        assert candidate.is_feasible()


class TestSearchSpaces:
    """Test cases for decoding the unit cube."""

    def test_recipe_space_bounds(self):
        """Test that the unit corners decode to the recipe bounds."""
        space = RecipeSpace(t_min=1.0, t_max=150.0)
        low, high = space.decode(np.zeros(6)), space.decode(np.ones(6))
        for name, (lo, hi) in RECIPE_BOUNDS.items():
            assert getattr(low, name) == lo
            assert getattr(high, name) == hi
        assert (low.t_stop, high.t_stop) == (1.0, 150.0)

    def test_schedule_space_feasible(self, rng):
        """Test that decoded schedules respect the gap rules."""
        space = ScheduleSpace(min_gap=5.0, max_measurements=3)
        assert space.dim == 9
        for _ in range(50):
            candidate = space.decode(rng.random(space.dim))
            assert candidate.is_feasible(min_gap=5.0, max_measurements=3)

    def test_reoptimisation_keeps_recipe(self, rng):
        """Test that only t_stop and the times change, and t_stop only shrinks."""
        recipe = Recipe(B0=2.0, P0=0.5, S0=4.0, V0=6.0, F=10.0, t_stop=80.0)
        space = ReoptimisationSpace(recipe=recipe, start=20.0, n_remaining=2)
        for _ in range(50):
            candidate = space.decode(rng.random(space.dim))
            assert 25.0 - 1e-9 <= candidate.recipe.t_stop <= 80.0
            assert candidate.recipe.x0() == pytest.approx(recipe.x0())
            assert candidate.recipe.F == recipe.F
            assert candidate.is_feasible(start=20.0, max_measurements=2)

    def test_reoptimisation_without_room(self):
        """Test that a batch too close to its stop time cannot be re-planned."""
        with pytest.raises(InfeasibleSearch):
            ReoptimisationSpace(recipe=Recipe(t_stop=50.0), start=48.0, n_remaining=1)


class TestOptimizeAcquisition:
    """Test cases for the random-plus-coordinate search."""

    def test_finds_known_optimum(self):
        """Test that a smooth bowl is maximised to within 2% of its range."""
        target = np.array([0.3, 0.7, 0.5, 0.1, 0.9, 0.4])

        def acq(units):
            return -np.sum((units - target) ** 2, axis=1)

        result = optimize_acquisition(acq, RecipeSpace(), 2000, np.random.default_rng(0))
        np.testing.assert_allclose(result.unit, target, atol=0.02)
        assert result.n_evaluations == 2000
        assert isinstance(result.candidate, Recipe)

    def test_deterministic(self):
        """Test that a fixed seed reproduces the search."""
        def acq(units):
            return np.sin(5 * units).sum(axis=1)

        a = optimize_acquisition(acq, RecipeSpace(), 300, np.random.default_rng(3))
        b = optimize_acquisition(acq, RecipeSpace(), 300, np.random.default_rng(3))
        np.testing.assert_array_equal(a.unit, b.unit)
        assert a.value == b.value

    def test_constraint_respected(self):
        """Test that the winner satisfies the constraint."""
        def acq(units):
            return units[:, 0]

        result = optimize_acquisition(acq, RecipeSpace(), 200, np.random.default_rng(1),
                                      constraint=lambda u: u[0] <= 0.5)
        assert result.unit[0] <= 0.5

    def test_all_infeasible(self):
        """Test that an unsatisfiable constraint raises InfeasibleSearch."""
        with pytest.raises(InfeasibleSearch):
            optimize_acquisition(lambda u: u[:, 0], RecipeSpace(), 50, np.random.default_rng(0),
                                 constraint=lambda u: False)

    def test_invalid_budget(self):
        """Test that a zero budget raises."""
        with pytest.raises(InvalidParameters):
            optimize_acquisition(lambda u: u[:, 0], RecipeSpace(), 0, np.random.default_rng(0))


class TestMonteCarloImprovement:
    """Test cases for the schedule-aware sampled improvement."""

    def test_hand_value(self):
        """Test two samples whose improvements are 0 and 0.125."""
        states = np.zeros((2, 1, 1, 4))
        states[0, 0, 0, 1], states[1, 0, 0, 1] = 1.0, 3.0
        states[..., 3] = 10.0
        values = improvement_from_states(states, np.array([[100.0]]), np.array([25.0]), -16801.5)
        assert values[0] == pytest.approx(0.0625, abs=1e-9)

    def test_infinite_incumbent(self):
        """Test that g_best = +inf gives zero improvement."""
        states = np.ones((3, 2, 2, 4))
        values = improvement_from_states(states, np.ones((2, 2)), np.zeros(2), np.inf)
        np.testing.assert_array_equal(values, 0.0)

    def test_best_point_on_schedule_counts(self, stub_model):
        """Test that the best profit along the schedule is used, not only t_stop."""
        early = ScheduleCandidate(Recipe(F=25.0, t_stop=100.0), (10.0,))
        late = ScheduleCandidate(Recipe(F=25.0, t_stop=100.0))
        g_best = float(profit(1.0, 10.0, 100.0, 25.0)) - 1.0
        values = mc_acquisition_batch(stub_model, [], [early, late], g_best, 4, torch.Generator())
        assert values[1] == pytest.approx(1.0)
        assert values[0] == pytest.approx(float(profit(1.0, 10.0, 10.0, 25.0)) - g_best)

    def test_single_candidate(self, stub_model):
        """Test that mc_acquisition matches the batched version."""
        candidate = ScheduleCandidate(Recipe(F=5.0, t_stop=40.0), (20.0,))
        batched = mc_acquisition_batch(stub_model, [], [candidate], -1e6, 2, torch.Generator())
        assert mc_acquisition(stub_model, [], candidate, -1e6, 2, torch.Generator()) == batched[0]

    def test_sample_count_convergence(self):
        """Test that 64 samples land within three standard errors of a 1024-sample estimate."""
        config = SanodepConfig(n_l=2, n_d=2, encoder_widths=(8,), r_dim=4, ode_widths=(8,),
                               decoder_widths=(8,), substeps=2)
        model = SanodepModel(config, StateScaler.penicillin(), torch.Generator().manual_seed(0))
        candidate = ScheduleCandidate(Recipe(F=25.0, t_stop=60.0), (20.0, 40.0))
        times = candidate.observation_times()[None, :]
        feeds = np.array([candidate.recipe.F])
        reference = model.predict_many([], candidate.recipe.x0()[None, :], times, 1024,
                                       torch.Generator().manual_seed(1))
        best = profit(reference.mean_samples[..., 1], reference.mean_samples[..., 3], times[None],
                      feeds[None, :, None]).max(axis=-1)[:, 0]
        g_best = float(np.median(best))
        spread = float(np.maximum(best - g_best, 0.0).std())
        assert spread > 0
        small = mc_acquisition(model, [], candidate, g_best, 64, torch.Generator().manual_seed(2))
        large = mc_acquisition(model, [], candidate, g_best, 1024, torch.Generator().manual_seed(3))
        assert abs(small - large) < 3.0 * spread / np.sqrt(64)


@pytest.fixture
def rng():
    """Seeded numpy generator."""
    return np.random.default_rng(2)


@pytest.fixture
def stub_model():
    """Surrogate whose every sample is P = 1, V = 10 at all times."""
    def predict_many(context, x0s, times, n_samples, generator, with_initial):
        states = np.zeros((n_samples,) + np.shape(times) + (4,))
        states[..., 1] = 1.0
        states[..., 3] = 10.0
        return SimpleNamespace(mean_samples=states)

    return SimpleNamespace(predict_many=predict_many)
