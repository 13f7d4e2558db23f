"""
FedBatchBO Campaign Module

This module runs complete Bayesian optimisation campaigns on one black-box
task for each strategy (SANODEP, GP-Standard, GP-Exp and random search),
keeps the per-iteration records, and normalises them by a cached task maximum
obtained from a large-budget GP-Standard run.
"""

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from scipy.stats import qmc

from .acquisition import (
    RecipeSpace,
    ReoptimisationSpace,
    ScheduleSpace,
    expected_improvement,
    mc_acquisition_batch,
    optimize_acquisition,
)
from .dynamics import (
    DEFAULT_FIXED,
    DEFAULT_PROFIT,
    DEFAULT_SOLVER,
    RECIPE_BOUNDS,
    RECIPE_FIELDS,
    FixedParams,
    ProfitCoefficients,
    Recipe,
    SolverSettings,
    Task,
    integrate_from,
    profit,
    simulate,
)
from .errors import CampaignFailed, DivergedTrajectory, FitFailed, InfeasibleSearch, InvalidParameters
from .gp_surrogate import GpHyperparams, GpModel, RecipeInputScaler, fit
from .tasking import TrajectoryPoints, sample_recipe

logger = logging.getLogger(__name__)

CAMPAIGN_COLUMNS = [
    "iteration", "trajectory_id", "B0", "P0", "S0", "V0", "F", "t_stop", "n_measurements",
    "g_raw", "g_best_raw", "g_best_norm", "cum_time_hr", "wall_ms",
]


class Strategy(Enum):
    SANODEP = "sanodep"
    GP_STANDARD = "gp-standard"
    GP_EXP = "gp-exp"
    RANDOM = "random"

    @property
    def code(self) -> int:
        return list(Strategy).index(self)


@dataclass(frozen=True)
class StrategySettings:
    """Budgets and search settings shared by the campaign runners."""

    sanodep_budget: int = 10
    gp_budget: int = 20
    random_budget: int = 20
    lhs_size: int = 5
    intermediate_count: int = 4
    max_measurements: int = 4
    min_gap: float = 5.0
    acq_budget: int = 512
    reopt_budget: int = 128
    mc_samples: int = 32
    gp_restarts: int = 5
    oracle_budget: int = 50
    oracle_seed: int = 20240
    reset_context: bool = False
    record_wall_clock: bool = False
    t_min: float = 1.0

    def __post_init__(self):
        if min(self.sanodep_budget, self.gp_budget, self.random_budget, self.oracle_budget) < 1:
            raise InvalidParameters("Trajectory budgets must be >= 1")
        if self.lhs_size < 2:
            raise InvalidParameters(f"LHS size must be >= 2, got {self.lhs_size}")
        if self.intermediate_count < 0 or self.max_measurements < 0 or self.min_gap <= 0:
            raise InvalidParameters("Measurement counts must be >= 0 and min_gap > 0")
        if self.acq_budget < 1 or self.reopt_budget < 1 or self.mc_samples < 1 or self.gp_restarts < 1:
            raise InvalidParameters("Search budgets, mc_samples and gp_restarts must be >= 1")

    def budget_for(self, strategy: Strategy) -> int:
        if strategy is Strategy.SANODEP:
            return self.sanodep_budget
        if strategy is Strategy.RANDOM:
            return self.random_budget
        return self.gp_budget


@dataclass
class IterationRecord:
    """One black-box trajectory; observed_states is empty when it diverged."""

    iteration: int
    recipe: Recipe
    schedule: Tuple[float, ...]
    observed_times: np.ndarray
    observed_states: np.ndarray
    g_raw: float
    g_best_raw: float
    cum_time_hr: float
    wall_ms: float = 0.0
    diverged: bool = False

    @property
    def n_measurements(self) -> int:
        return len(self.observed_times)


@dataclass
class CampaignResult:
    task: Task
    strategy: Strategy
    seed: int
    task_index: int = 0
    records: List[IterationRecord] = field(default_factory=list)
    task_max: Optional[float] = None
    n_model_points: int = 0

    def best_so_far(self) -> np.ndarray:
        return np.array([r.g_best_raw for r in self.records])

    def normalise(self, task_max: float) -> np.ndarray:
        """Best-so-far divided by the task maximum."""
        if task_max == 0 or not np.isfinite(task_max):
            raise InvalidParameters(f"Cannot normalise by task maximum {task_max}")
        self.task_max = float(task_max)
        return self.best_so_far() / self.task_max

    def to_frame(self) -> pd.DataFrame:
        norm = self.best_so_far() / self.task_max if self.task_max is not None else np.full(len(self.records), np.nan)
        rows = []
        for record, g_norm in zip(self.records, norm):
            rows.append({
                "iteration": record.iteration,
                "trajectory_id": record.iteration,
                **{name: getattr(record.recipe, name) for name in RECIPE_FIELDS},
                "n_measurements": record.n_measurements,
                "g_raw": record.g_raw,
                "g_best_raw": record.g_best_raw,
                "g_best_norm": g_norm,
                "cum_time_hr": record.cum_time_hr,
                "wall_ms": record.wall_ms,
            })
        return pd.DataFrame(rows, columns=CAMPAIGN_COLUMNS)


def strategy_rng(seed: int, task_index: int, strategy: Strategy) -> np.random.Generator:
    """Independent reproducible stream per (seed, task, strategy)."""
    return np.random.default_rng([int(seed), int(task_index), strategy.code])


def observe_recipe(recipe: Recipe, task: Task, times: Sequence[float], fixed: FixedParams = DEFAULT_FIXED,
                   solver: SolverSettings = DEFAULT_SOLVER) -> np.ndarray:
    """Run the black box and return the states at ``times`` (each in (0, t_stop])."""
    times = np.asarray(times, dtype=float)
    grid = np.unique(np.concatenate([[0.0], times, [recipe.t_stop]]))
    trajectory = simulate(recipe, task, fixed, grid, solver)
    return trajectory.states[np.searchsorted(grid, times)]


class _Clock:
    def __init__(self, enabled: bool):
        self.enabled = enabled
        self.start = time.perf_counter()

    def elapsed_ms(self) -> float:
        return (time.perf_counter() - self.start) * 1000.0 if self.enabled else 0.0


def _lhs_units(n: int, rng: np.random.Generator) -> np.ndarray:
    return qmc.LatinHypercube(d=len(RECIPE_FIELDS), seed=rng).random(n)


def _units_to_inputs(units: np.ndarray, space: RecipeSpace, scaler: RecipeInputScaler) -> np.ndarray:
    lower = np.array([RECIPE_BOUNDS[n][0] for n in RECIPE_FIELDS[:-1]] + [space.t_min])
    upper = np.array([RECIPE_BOUNDS[n][1] for n in RECIPE_FIELDS[:-1]] + [space.t_max])
    return scaler.transform(lower + np.clip(units, 0.0, 1.0) * (upper - lower))


def _fit_gp(X: List[np.ndarray], y: List[float], settings: StrategySettings, rng: np.random.Generator) -> GpModel:
    X_arr, y_arr = np.array(X), np.array(y)
    try:
        return fit(X_arr, y_arr, restarts=settings.gp_restarts, rng=rng)
    except FitFailed as e:
        logger.warning(f"GP fit failed ({e}); retrying with a larger noise floor")
    var_y = float(np.var(y_arr)) or 1.0
    init = GpHyperparams(lengthscales=(0.5,) * X_arr.shape[1], signal_variance=var_y, noise_variance=1e-2 * var_y)
    try:
        return fit(X_arr, y_arr, init=init, restarts=settings.gp_restarts, rng=rng)
    except FitFailed as e:
        raise CampaignFailed(f"GP fit failed twice on {len(y)} points: {e}") from e


def _run_gp(task: Task, settings: StrategySettings, rng: np.random.Generator, budget: int, intermediate_count: int,
            strategy: Strategy, fixed: FixedParams, solver: SolverSettings,
            coeffs: ProfitCoefficients) -> CampaignResult:
    scaler = RecipeInputScaler.default(solver.t_max)
    space = RecipeSpace(t_min=settings.t_min, t_max=solver.t_max)
    n_lhs = min(settings.lhs_size, budget)
    lhs = _lhs_units(n_lhs, rng)
    result = CampaignResult(task=task, strategy=strategy, seed=-1)
    X: List[np.ndarray] = []
    y: List[float] = []
    g_best, cum_time = -np.inf, 0.0

    for it in range(budget):
        clock = _Clock(settings.record_wall_clock)
        if it < n_lhs or len(y) < 2:
            unit = lhs[it] if it < n_lhs else rng.random(space.dim)
            recipe = space.decode(unit)
        else:
            model = _fit_gp(X, y, settings, rng)
            incumbent = max(y)

            def acq(units, model=model, incumbent=incumbent):
                means, variances = model.posterior_batch(_units_to_inputs(units, space, scaler))
                return expected_improvement(means, np.sqrt(variances), incumbent)

            recipe = optimize_acquisition(acq, space, settings.acq_budget, rng).candidate

        n_extra = intermediate_count if it >= n_lhs else 0
        times = [recipe.t_stop * i / (n_extra + 1) for i in range(1, n_extra + 1)]
        times.append(recipe.t_stop)
        cum_time += recipe.t_stop
        try:
            states = observe_recipe(recipe, task, times, fixed, solver)
        except DivergedTrajectory as e:
            logger.warning(f"{strategy.value} iteration {it}: black box diverged ({e}); budget consumed")
            result.records.append(IterationRecord(it, recipe, tuple(times[:-1]), np.array([]), np.empty((0, 4)),
                                                  np.nan, g_best, cum_time, clock.elapsed_ms(), diverged=True))
            continue
        g = profit(states[:, 1], states[:, 3], np.array(times), recipe.F, coeffs)
        for t, value in zip(times, g):
            X.append(scaler.recipe_input(recipe, t))
            y.append(float(value))
        g_best = max(g_best, float(np.max(g)))
        result.records.append(IterationRecord(it, recipe, tuple(times[:-1]), np.array(times), states,
                                              float(np.max(g)), g_best, cum_time, clock.elapsed_ms()))
        logger.debug(f"{strategy.value} iteration {it}: g={np.max(g):.4f}, best={g_best:.4f}")
    result.n_model_points = len(y)
    return result


def run_gp_standard(task: Task, settings: StrategySettings, rng: np.random.Generator,
                    fixed: FixedParams = DEFAULT_FIXED, solver: SolverSettings = DEFAULT_SOLVER,
                    coeffs: ProfitCoefficients = DEFAULT_PROFIT, budget: Optional[int] = None) -> CampaignResult:
    """GP-BO with EI over (recipe, t_stop); one observation per trajectory at t_stop."""
    budget = settings.gp_budget if budget is None else budget
    return _run_gp(task, settings, rng, budget, 0, Strategy.GP_STANDARD, fixed, solver, coeffs)


def run_gp_exp(task: Task, settings: StrategySettings, rng: np.random.Generator,
               fixed: FixedParams = DEFAULT_FIXED, solver: SolverSettings = DEFAULT_SOLVER,
               coeffs: ProfitCoefficients = DEFAULT_PROFIT) -> CampaignResult:
    """GP-Standard plus free intermediate observations at t_stop * i / (n + 1)."""
    return _run_gp(task, settings, rng, settings.gp_budget, settings.intermediate_count, Strategy.GP_EXP,
                   fixed, solver, coeffs)


def run_random(task: Task, settings: StrategySettings, rng: np.random.Generator,
               fixed: FixedParams = DEFAULT_FIXED, solver: SolverSettings = DEFAULT_SOLVER,
               coeffs: ProfitCoefficients = DEFAULT_PROFIT) -> CampaignResult:
    result = CampaignResult(task=task, strategy=Strategy.RANDOM, seed=-1)
    g_best, cum_time = -np.inf, 0.0
    for it in range(settings.random_budget):
        clock = _Clock(settings.record_wall_clock)
        recipe = sample_recipe(rng, solver.t_max)
        cum_time += recipe.t_stop
        try:
            states = observe_recipe(recipe, task, [recipe.t_stop], fixed, solver)
        except DivergedTrajectory as e:
            logger.warning(f"random iteration {it}: black box diverged ({e}); budget consumed")
            result.records.append(IterationRecord(it, recipe, (), np.array([]), np.empty((0, 4)), np.nan,
                                                  g_best, cum_time, clock.elapsed_ms(), diverged=True))
            continue
        g = float(profit(states[0, 1], states[0, 3], recipe.t_stop, recipe.F, coeffs))
        g_best = max(g_best, g)
        result.records.append(IterationRecord(it, recipe, (), np.array([recipe.t_stop]), states, g, g_best,
                                              cum_time, clock.elapsed_ms()))
    result.n_model_points = 0
    return result


def run_sanodep(model, task: Task, settings: StrategySettings, rng: np.random.Generator,
                fixed: FixedParams = DEFAULT_FIXED, solver: SolverSettings = DEFAULT_SOLVER,
                coeffs: ProfitCoefficients = DEFAULT_PROFIT) -> CampaignResult:
    """Non-myopic SANODEP loop starting from an empty context.

    Each trajectory: choose (recipe, schedule) by Monte-Carlo improvement,
    advance the real batch to each scheduled time, add the observation to the
    context and re-plan the rest of the schedule in [t_n + gap, t_stop]. The
    model weights never change; only the context grows.
    """
    space = ScheduleSpace(min_gap=settings.min_gap, max_measurements=settings.max_measurements,
                          t_min=settings.t_min, t_max=solver.t_max)
    generator = torch.Generator().manual_seed(int(rng.integers(0, 2 ** 62)))
    result = CampaignResult(task=task, strategy=Strategy.SANODEP, seed=-1)
    context: List[TrajectoryPoints] = []
    g_best, cum_time = -np.inf, 0.0

    def plan(search_space, budget, with_initial):
        def acq(units):
            candidates = [search_space.decode(u) for u in units]
            return mc_acquisition_batch(model, context, candidates, g_best, settings.mc_samples, generator,
                                        coeffs, with_initial)
        return optimize_acquisition(acq, search_space, budget, rng).candidate

    for it in range(settings.sanodep_budget):
        clock = _Clock(settings.record_wall_clock)
        if settings.reset_context:
            context = []
        candidate = plan(space, settings.acq_budget, True)
        recipe, schedule = candidate.recipe, list(candidate.times)
        x0 = recipe.x0()
        context.append(TrajectoryPoints.initial(x0, trajectory=it))

        state, t, taken = x0, 0.0, 0
        times, states, g_values = [], [], []
        diverged = False
        while True:
            next_t = schedule[0] if schedule else recipe.t_stop
            try:
                state = integrate_from(state, recipe.F, task, fixed, [t, next_t], solver)[-1]
            except DivergedTrajectory as e:
                logger.warning(f"sanodep iteration {it}: black box diverged near t={e.time:.4g}; budget consumed")
                diverged = True
                break
            t = next_t
            times.append(t)
            states.append(state)
            context.append(TrajectoryPoints(x0=x0, times=[t], states=[state], trajectory=it))
            g = float(profit(state[1], state[3], t, recipe.F, coeffs))
            g_values.append(g)
            g_best = max(g_best, g)
            if t >= recipe.t_stop:
                break
            taken += 1
            try:
                remaining = ReoptimisationSpace(recipe, t, settings.max_measurements - taken, settings.min_gap)
            except InfeasibleSearch:
                schedule = []
                continue
            replanned = plan(remaining, settings.reopt_budget, False)
            recipe, schedule = replanned.recipe, list(replanned.times)

        cum_time += t if diverged else recipe.t_stop
        result.records.append(IterationRecord(
            it, recipe, tuple(times[:-1]) if not diverged else tuple(times), np.array(times),
            np.array(states).reshape(-1, 4), max(g_values) if g_values else np.nan, g_best, cum_time,
            clock.elapsed_ms(), diverged=diverged,
        ))
        logger.info(f"sanodep iteration {it}: {len(times)} observations, best={g_best:.4f}")
    result.n_model_points = sum(len(p) for p in context)
    return result


def run_strategy(strategy: Strategy, task: Task, settings: StrategySettings, seed: int, task_index: int = 0,
                 model=None, fixed: FixedParams = DEFAULT_FIXED, solver: SolverSettings = DEFAULT_SOLVER,
                 coeffs: ProfitCoefficients = DEFAULT_PROFIT) -> CampaignResult:
    """Run one (strategy, task, seed) campaign on its own rng stream."""
    rng = strategy_rng(seed, task_index, strategy)
    logger.info(f"Starting {strategy.value} campaign on task {task_index} (seed {seed})")
    if strategy is Strategy.SANODEP:
        if model is None:
            raise CampaignFailed("The SANODEP strategy needs a trained model")
        result = run_sanodep(model, task, settings, rng, fixed, solver, coeffs)
    elif strategy is Strategy.GP_STANDARD:
        result = run_gp_standard(task, settings, rng, fixed, solver, coeffs)
    elif strategy is Strategy.GP_EXP:
        result = run_gp_exp(task, settings, rng, fixed, solver, coeffs)
    else:
        result = run_random(task, settings, rng, fixed, solver, coeffs)
    result.seed = seed
    result.task_index = task_index
    logger.info(f"Finished {strategy.value} campaign on task {task_index}: best={result.best_so_far()[-1]:.4f}")
    return result


def task_max_oracle(task: Task, settings: StrategySettings, fixed: FixedParams = DEFAULT_FIXED,
                    solver: SolverSettings = DEFAULT_SOLVER, coeffs: ProfitCoefficients = DEFAULT_PROFIT,
                    rng: Optional[np.random.Generator] = None) -> float:
    """Best raw objective of a GP-Standard run with the oracle budget and seed."""
    rng = rng if rng is not None else np.random.default_rng(settings.oracle_seed)
    result = run_gp_standard(task, settings, rng, fixed, solver, coeffs, budget=settings.oracle_budget)
    best = result.best_so_far()[-1]
    if not np.isfinite(best):
        raise CampaignFailed("Oracle campaign produced no valid observation")
    return float(best)


def _task_key(task: Task, oracle_seed: int) -> str:
    return json.dumps([*(float(v) for v in task.as_array()), int(oracle_seed)])


class TaskMaxCache:
    """Task maxima keyed by (task, oracle seed), optionally persisted to a JSON file."""

    def __init__(self, settings: StrategySettings, path: Optional[str] = None,
                 fixed: FixedParams = DEFAULT_FIXED, solver: SolverSettings = DEFAULT_SOLVER,
                 coeffs: ProfitCoefficients = DEFAULT_PROFIT):
        self.settings = settings
        self.path = path
        self.fixed, self.solver, self.coeffs = fixed, solver, coeffs
        self.values: Dict[str, float] = self._load()

    def _load(self) -> Dict[str, float]:
        if self.path and os.path.exists(self.path):
            try:
                with open(self.path, "r", encoding="utf-8") as f:
                    return {k: float(v) for k, v in json.load(f).items()}
            except (json.JSONDecodeError, IOError) as e:
                logger.warning(f"Failed to load task maxima: {e}")
        return {}

    def _save(self):
        if not self.path:
            return
        try:
            with open(self.path, "w", encoding="utf-8") as f:
                json.dump(self.values, f, indent=2, sort_keys=True)
        except IOError as e:
            logger.error(f"Failed to save task maxima: {e}")

    def key(self, task: Task) -> str:
        return _task_key(task, self.settings.oracle_seed)

    def missing(self, tasks: Sequence[Task]) -> List[Task]:
        return [task for task in tasks if self.key(task) not in self.values]

    def put(self, task: Task, value: float):
        self.values[self.key(task)] = float(value)
        self._save()

    def get(self, task: Task) -> float:
        key = self.key(task)
        if key not in self.values:
            logger.info(f"Computing task maximum for {task.fingerprint()}")
            self.values[key] = task_max_oracle(task, self.settings, self.fixed, self.solver, self.coeffs)
            self._save()
        return self.values[key]


def settings_to_dict(settings: StrategySettings) -> Dict[str, Any]:
    return asdict(settings)
