"""
FedBatchBO Acquisition Module

This module provides the acquisition side of the optimisation loop: closed-form
Expected Improvement for the GP baselines, a Monte-Carlo schedule-aware
improvement for SANODEP, the search spaces that map the unit cube onto
recipes and measurement schedules, and a seeded random-plus-coordinate search.
"""

import logging
import math
from dataclasses import dataclass
from typing import Any, Callable, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy.stats import norm

from .dynamics import DEFAULT_PROFIT, DEFAULT_SOLVER, RECIPE_BOUNDS, RECIPE_FIELDS, ProfitCoefficients, Recipe, profit
from .errors import InfeasibleSearch, InvalidParameters, NonFiniteLatent

logger = logging.getLogger(__name__)

DEFAULT_MIN_GAP = 5.0
DEFAULT_MAX_INTERMEDIATE = 4
_TOL = 1e-9


def expected_improvement(mean, std, g_best):
    """(mu - g) Phi(z) + sigma phi(z) with z = (mu - g) / sigma; max(mu - g, 0) where sigma = 0."""
    mean = np.asarray(mean, dtype=float)
    std = np.asarray(std, dtype=float)
    if np.any(std < 0):
        raise InvalidParameters("Standard deviation must be non-negative")
    diff = mean - g_best
    safe = np.where(std > 0, std, 1.0)
    z = diff / safe
    ei = np.where(std > 0, diff * norm.cdf(z) + std * norm.pdf(z), np.maximum(diff, 0.0))
    ei = np.maximum(ei, 0.0)
    return float(ei) if ei.ndim == 0 else ei


@dataclass(frozen=True)
class ScheduleCandidate:
    """A recipe with its intermediate measurement times; t_stop is always observed last."""

    recipe: Recipe
    times: Tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "times", tuple(float(t) for t in self.times))

    def observation_times(self) -> np.ndarray:
        return np.array(self.times + (self.recipe.t_stop,))

    def is_feasible(self, start: float = 0.0, min_gap: float = DEFAULT_MIN_GAP,
                    max_measurements: int = DEFAULT_MAX_INTERMEDIATE) -> bool:
        return check_schedule(self.times, self.recipe.t_stop, start, min_gap, max_measurements)


def check_schedule(times: Sequence[float], t_stop: float, start: float = 0.0,
                   min_gap: float = DEFAULT_MIN_GAP, max_measurements: int = DEFAULT_MAX_INTERMEDIATE) -> bool:
    """t1 >= start + gap, consecutive gaps >= gap and t_N <= t_stop - gap."""
    times = np.asarray(times, dtype=float)
    if len(times) > max_measurements:
        return False
    if len(times) == 0:
        return True
    return bool(
        times[0] >= start + min_gap - _TOL
        and np.all(np.diff(times) >= min_gap - _TOL)
        and times[-1] <= t_stop - min_gap + _TOL
    )


def schedule_from_unit(weights: Sequence[float], start: float, t_stop: float,
                       min_gap: float = DEFAULT_MIN_GAP, max_measurements: int = DEFAULT_MAX_INTERMEDIATE
                       ) -> Tuple[float, ...]:
    """Map weights in [0, 1] to feasible measurement times in [start + gap, t_stop - gap].

    Uses as many measurements as fit; the slack left after the minimum gaps
    is shared out in proportion to the weights, so spacing holds by construction.
    """
    room = t_stop - min_gap - start
    if room < min_gap - _TOL:
        return ()
    n = min(max_measurements, int(math.floor(room / min_gap + _TOL)))
    if n <= 0:
        return ()
    slack = max(room - n * min_gap, 0.0)
    extra = np.clip(np.asarray(weights, dtype=float)[:n], 0.0, 1.0) * slack / n
    times = start + min_gap * np.arange(1, n + 1) + np.cumsum(extra)
    return tuple(float(t) for t in np.minimum(times, t_stop - min_gap))


class SearchSpace:
    """Decodes points of the unit cube into candidates."""

    dim: int = 0

    def decode(self, unit: np.ndarray) -> Any:
        raise NotImplementedError


def _recipe_from_unit(unit: np.ndarray, t_min: float, t_max: float) -> Recipe:
    values = {}
    for i, name in enumerate(RECIPE_FIELDS[:-1]):
        low, high = RECIPE_BOUNDS[name]
        values[name] = low + float(np.clip(unit[i], 0.0, 1.0)) * (high - low)
    values["t_stop"] = t_min + float(np.clip(unit[5], 0.0, 1.0)) * (t_max - t_min)
    return Recipe(**values)


@dataclass
class RecipeSpace(SearchSpace):
    """(B0, P0, S0, V0, F, t_stop) within the recipe bounds; used by the GP baselines."""

    t_min: float = 1.0
    t_max: float = DEFAULT_SOLVER.t_max

    @property
    def dim(self) -> int:
        return 6

    def decode(self, unit: np.ndarray) -> Recipe:
        return _recipe_from_unit(unit, self.t_min, self.t_max)


@dataclass
class ScheduleSpace(SearchSpace):
    """A recipe plus up to ``max_measurements`` intermediate times."""

    min_gap: float = DEFAULT_MIN_GAP
    max_measurements: int = DEFAULT_MAX_INTERMEDIATE
    t_min: float = 1.0
    t_max: float = DEFAULT_SOLVER.t_max

    @property
    def dim(self) -> int:
        return 6 + self.max_measurements

    def decode(self, unit: np.ndarray) -> ScheduleCandidate:
        recipe = _recipe_from_unit(unit, self.t_min, self.t_max)
        times = schedule_from_unit(unit[6:], 0.0, recipe.t_stop, self.min_gap, self.max_measurements)
        return ScheduleCandidate(recipe, times)


@dataclass
class ReoptimisationSpace(SearchSpace):
    """Remaining schedule of a running batch: x0 and F frozen, t_stop may only shrink.

    Times lie in [start + gap, t_stop - gap] and t_stop in [start + gap, current t_stop].
    """

    recipe: Recipe
    start: float
    n_remaining: int
    min_gap: float = DEFAULT_MIN_GAP

    def __post_init__(self):
        if self.start + self.min_gap > self.recipe.t_stop + _TOL:
            raise InfeasibleSearch(
                f"No room for another observation after t={self.start:.4g} with t_stop={self.recipe.t_stop:.4g}"
            )

    @property
    def dim(self) -> int:
        return 1 + self.n_remaining

    def decode(self, unit: np.ndarray) -> ScheduleCandidate:
        lower = min(self.start + self.min_gap, self.recipe.t_stop)
        t_stop = lower + float(np.clip(unit[0], 0.0, 1.0)) * (self.recipe.t_stop - lower)
        recipe = self.recipe.with_stop(t_stop)
        times = schedule_from_unit(unit[1:], self.start, t_stop, self.min_gap, self.n_remaining)
        return ScheduleCandidate(recipe, times)


@dataclass
class SearchResult:
    candidate: Any
    unit: np.ndarray
    value: float
    n_evaluations: int


def _evaluate(acq: Callable[[np.ndarray], np.ndarray], units: np.ndarray, batch_size: int) -> np.ndarray:
    values = np.empty(len(units))
    for start in range(0, len(units), batch_size):
        chunk = units[start:start + batch_size]
        try:
            values[start:start + len(chunk)] = acq(chunk)
        except NonFiniteLatent:
            logger.warning(f"Non-finite latent in a batch of {len(chunk)} candidates; evaluating one by one")
            for j, u in enumerate(chunk):
                try:
                    values[start + j] = acq(u[None, :])[0]
                except NonFiniteLatent:
                    values[start + j] = -np.inf
    values[~np.isfinite(values)] = -np.inf
    return values


def optimize_acquisition(acq: Callable[[np.ndarray], np.ndarray], space: SearchSpace, budget: int,
                         rng: np.random.Generator,
                         constraint: Optional[Callable[[np.ndarray], bool]] = None,
                         batch_size: int = 256, initial_step: float = 0.1) -> SearchResult:
    """Maximise ``acq`` over the unit cube of ``space``.

    Three quarters of the budget go to uniform random points; the rest to a
    coordinate search around the best point that halves its step whenever no
    move improves. Ties go to the lowest candidate index.

    Args:
        acq: maps an (n, space.dim) array of unit points to n values
        space: decodes the winning point
        budget: total number of acquisition evaluations, >= 1
        rng: source of the random starts
        constraint: optional feasibility test on a unit point

    Raises:
        InfeasibleSearch: when no evaluated point is feasible and finite
    """
    if budget < 1:
        raise InvalidParameters(f"Acquisition budget must be >= 1, got {budget}")
    dim = space.dim
    n_random = max(1, (3 * budget) // 4)
    units = rng.random((n_random, dim))
    values = _evaluate(acq, units, batch_size)
    if constraint is not None:
        feasible = np.array([bool(constraint(u)) for u in units])
        values[~feasible] = -np.inf
    if not np.isfinite(values).any():
        raise InfeasibleSearch(f"None of {n_random} random candidates was feasible")
    best_idx = int(np.argmax(values))
    best_unit, best_value = units[best_idx].copy(), float(values[best_idx])

    remaining = budget - n_random
    step = initial_step
    while remaining > 0 and dim > 0 and step > 1e-12:
        moves = []
        for d in range(dim):
            for sign in (1.0, -1.0):
                move = best_unit.copy()
                move[d] = np.clip(move[d] + sign * step, 0.0, 1.0)
                moves.append(move)
        moves = np.array(moves[:remaining])
        remaining -= len(moves)
        move_values = _evaluate(acq, moves, batch_size)
        if constraint is not None:
            move_values[[not constraint(m) for m in moves]] = -np.inf
        j = int(np.argmax(move_values))
        if move_values[j] > best_value:
            best_unit, best_value = moves[j].copy(), float(move_values[j])
        else:
            step /= 2.0

    return SearchResult(candidate=space.decode(best_unit), unit=best_unit, value=best_value,
                        n_evaluations=budget - max(remaining, 0))


def improvement_from_states(states: np.ndarray, times: np.ndarray, feeds: np.ndarray, g_best: float,
                            coeffs: ProfitCoefficients = DEFAULT_PROFIT) -> np.ndarray:
    """Mean over samples of max(0, best profit along the schedule - g_best).

    Args:
        states: sampled states, shape (S, C, T, 4)
        times: observation times, shape (C, T)
        feeds: feed rate per candidate, shape (C,)

    Returns:
        one value per candidate; with no incumbent (g_best = -inf) the mean
        best sampled profit is returned instead
    """
    if g_best == np.inf:
        return np.zeros(states.shape[1])
    g = profit(states[..., 1], states[..., 3], times[None], feeds[None, :, None], coeffs)
    best = g.max(axis=-1)
    if g_best == -np.inf:
        return best.mean(axis=0)
    return np.maximum(best - g_best, 0.0).mean(axis=0)


def mc_acquisition_batch(model, context: Sequence[Any], candidates: Sequence[ScheduleCandidate], g_best: float,
                         n_samples: int, generator: torch.Generator,
                         coeffs: ProfitCoefficients = DEFAULT_PROFIT, with_initial: bool = True) -> np.ndarray:
    """Schedule-aware Monte-Carlo improvement for many candidates."""
    values = np.zeros(len(candidates))
    if g_best == np.inf:
        return values
    groups = {}
    for i, c in enumerate(candidates):
        groups.setdefault(len(c.times), []).append(i)
    for _, idx in sorted(groups.items()):
        x0s = np.stack([candidates[i].recipe.x0() for i in idx])
        times = np.stack([candidates[i].observation_times() for i in idx])
        feeds = np.array([candidates[i].recipe.F for i in idx])
        pred = model.predict_many(context, x0s, times, n_samples, generator, with_initial)
        values[idx] = improvement_from_states(pred.mean_samples, times, feeds, g_best, coeffs)
    return values


def mc_acquisition(model, context: Sequence[Any], candidate: ScheduleCandidate, g_best: float,
                   n_samples: int, generator: torch.Generator,
                   coeffs: ProfitCoefficients = DEFAULT_PROFIT, with_initial: bool = True) -> float:
    return float(mc_acquisition_batch(model, context, [candidate], g_best, n_samples, generator,
                                      coeffs, with_initial)[0])
