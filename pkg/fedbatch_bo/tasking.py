"""
FedBatchBO Tasking Module

This module samples tasks, recipes and meta-training episodes: the on/off-task
distributions used for training and testing, the nested target/context
subsampling of each simulated system, and the forecast/interpolate context
updates of the bi-scenario training procedure.
"""

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .dynamics import (
    DEFAULT_FIXED,
    DEFAULT_SOLVER,
    NOMINAL_TASK,
    RECIPE_BOUNDS,
    FixedParams,
    Recipe,
    SolverSettings,
    Task,
    simulate_batch,
)
from .errors import DivergedTrajectory, InvalidDistribution, InvalidParameters

logger = logging.getLogger(__name__)

CACHE_SCHEMA_VERSION = 1


class Scenario(Enum):
    """Which context update an episode trains on."""

    FORECAST = "forecast"
    INTERPOLATE = "interpolate"


@dataclass(frozen=True)
class TaskDistribution:
    """k = offset*k_nom + U[(1-window)*k_nom, (1+window)*k_nom], componentwise."""

    offset: float = 0.0
    window: float = 0.05
    nominal: Task = NOMINAL_TASK
    name: str = "on-task-train"

    def __post_init__(self):
        if not np.isfinite(self.offset) or not np.isfinite(self.window) or self.window < 0.0:
            raise InvalidDistribution(f"Invalid distribution {self.name}: offset={self.offset}, window={self.window}")

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        """Componentwise support (lower, upper) of sampled tasks."""
        k = self.nominal.as_array()
        return (self.offset + 1.0 - self.window) * k, (self.offset + 1.0 + self.window) * k

    def sample(self, rng: np.random.Generator) -> Task:
        return sample_task(self, rng)


# Signed offsets are distinct named distributions
DEFAULT_DISTRIBUTIONS: Dict[str, TaskDistribution] = {
    name: TaskDistribution(offset=offset, window=window, name=name)
    for name, offset, window in [
        ("on-task-train", 0.0, 0.05),
        ("on-task", 0.0, 0.01),
        ("almost-off-task+", 0.04, 0.01),
        ("almost-off-task-", -0.04, 0.01),
        ("slightly-off-task+", 0.06, 0.01),
        ("slightly-off-task-", -0.06, 0.01),
        ("very-off-task+", 0.5, 0.01),
        ("very-off-task-", -0.5, 0.01),
    ]
}

TESTING_DISTRIBUTIONS = [name for name in DEFAULT_DISTRIBUTIONS if name != "on-task-train"]


@dataclass(frozen=True)
class EpisodeConfig:
    """Episode sampling limits.

    Field names map onto the usual symbols: trajectories = M, context = m,
    target = n, update = n_o, forecast_prob = lambda.
    """

    min_trajectories: int = 1
    max_trajectories: int = 5
    min_context: int = 2
    max_context: int = 8
    min_target: int = 8
    max_target: int = 20
    n_grid: int = 100
    n_x0: int = 8
    n_sys: int = 16
    forecast_prob: float = 0.5
    min_update: int = 2
    max_update: int = 4
    max_retries: int = 10

    def __post_init__(self):
        problems = []
        if not 1 <= self.min_context <= self.max_context <= self.max_target <= self.n_grid:
            problems.append("need 1 <= min_context <= max_context <= max_target <= n_grid")
        if not 1 <= self.min_target <= self.max_target:
            problems.append("need 1 <= min_target <= max_target")
        if not 1 <= self.min_trajectories <= self.max_trajectories <= self.n_x0:
            problems.append("need 1 <= min_trajectories <= max_trajectories <= n_x0")
        if not 0.0 <= self.forecast_prob <= 1.0:
            problems.append("forecast_prob must lie in [0, 1]")
        if not 2 <= self.min_update <= self.max_update <= self.n_grid - 1 - self.max_context:
            problems.append("need 2 <= min_update <= max_update <= n_grid - 1 - max_context")
        if self.n_sys < 1 or self.max_retries < 0:
            problems.append("n_sys must be >= 1 and max_retries >= 0")
        if problems:
            raise InvalidParameters(f"Invalid episode config: {'; '.join(problems)}")


@dataclass
class TrajectoryPoints:
    """Observed (t, x0, x_t) triples of a single trajectory; t0 is always 0."""

    x0: np.ndarray
    times: np.ndarray
    states: np.ndarray
    trajectory: int = 0

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float)
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float).reshape(len(self.times), -1)

    def __len__(self) -> int:
        return len(self.times)

    @classmethod
    def initial(cls, x0: Sequence[float], trajectory: int = 0) -> "TrajectoryPoints":
        """The forecast-mode triple (t0, x0, x0)."""
        x0 = np.asarray(x0, dtype=float)
        return cls(x0=x0, times=np.zeros(1), states=x0[None, :], trajectory=trajectory)

    def point_set(self) -> set:
        return {(float(t), tuple(s)) for t, s in zip(self.times, self.states)}


@dataclass
class SystemSample:
    """The data half of one system: simulated trajectories and their subsamples."""

    task: Any
    grid: np.ndarray
    x0s: np.ndarray
    states: np.ndarray
    n_observed: int
    target_idx: List[np.ndarray]
    context_idx: List[np.ndarray]

    def points(self, k: int, idx: Sequence[int]) -> TrajectoryPoints:
        idx = np.asarray(idx, dtype=int)
        return TrajectoryPoints(x0=self.x0s[k], times=self.grid[idx], states=self.states[k, idx], trajectory=k)


@dataclass
class Episode:
    """One meta-training unit: observed context/target plus a scenario update."""

    task: Any
    context: List[TrajectoryPoints]
    target: List[TrajectoryPoints]
    scenario: Scenario
    update_context: TrajectoryPoints
    update_target: TrajectoryPoints
    update_index: int = 0

    def full_context(self) -> List[TrajectoryPoints]:
        """C = C_observed + C_update."""
        return list(self.context) + [self.update_context]

    def full_target(self) -> List[TrajectoryPoints]:
        """T = C + T_update."""
        return self.full_context()[:-1] + [self.update_target]


def sample_task(dist: TaskDistribution, rng: np.random.Generator) -> Task:
    """Draw one task from a (possibly offset) uniform window around the nominal task."""
    if dist.offset + 1.0 - dist.window <= 0.0:
        raise InvalidDistribution(
            f"Distribution {dist.name} reaches non-positive parameters (offset={dist.offset}, window={dist.window})"
        )
    k = dist.nominal.as_array()
    values = dist.offset * k + rng.uniform((1.0 - dist.window) * k, (1.0 + dist.window) * k)
    if np.any(values <= 0.0):
        raise InvalidDistribution(f"Distribution {dist.name} produced non-positive parameters {values}")
    return Task.from_array(values)


def sample_recipe(rng: np.random.Generator, t_max: float = DEFAULT_SOLVER.t_max) -> Recipe:
    """Draw a recipe from the recipe bounds with t_stop ~ U(0, t_max]."""
    F = rng.uniform(*RECIPE_BOUNDS["F"])
    B0 = rng.uniform(*RECIPE_BOUNDS["B0"])
    P0 = rng.uniform(*RECIPE_BOUNDS["P0"])
    S0 = rng.uniform(*RECIPE_BOUNDS["S0"])
    V0 = rng.uniform(*RECIPE_BOUNDS["V0"])
    t_stop = t_max * (1.0 - rng.random())
    return Recipe(B0=B0, P0=P0, S0=S0, V0=V0, F=F, t_stop=t_stop)


def scenario_flip(forecast_prob: float, rng: np.random.Generator) -> Scenario:
    """Bernoulli(forecast_prob) choice between forecasting and interpolation."""
    if not 0.0 <= forecast_prob <= 1.0:
        raise InvalidParameters(f"forecast_prob must lie in [0, 1], got {forecast_prob}")
    return Scenario.FORECAST if rng.random() < forecast_prob else Scenario.INTERPOLATE


def episode_rng(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based stream keyed by (seed, keys...), independent of call order."""
    return np.random.default_rng([int(seed), *(int(k) for k in keys)])


# Stream tags under a (seed, step) key
SYSTEM_STREAM = 1
SUBSAMPLE_STREAM = 2
EPISODE_STREAM = 3

StreamKey = Optional[Tuple[int, ...]]


def _stream(rng: np.random.Generator, key: StreamKey, *index: int) -> np.random.Generator:
    return rng if key is None else episode_rng(*key, *index)


def _subsample(cfg: EpisodeConfig, n_grid: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    n_target = int(rng.integers(cfg.min_target, cfg.max_target + 1))
    n_target = min(n_target, n_grid)
    interior = rng.choice(np.arange(1, n_grid), size=n_target - 1, replace=False)
    target_idx = np.sort(np.concatenate([[0], interior]).astype(int))
    n_context = int(rng.integers(cfg.min_context, min(cfg.max_context, n_target) + 1))
    context_idx = np.sort(rng.choice(target_idx, size=n_context, replace=False))
    return target_idx, context_idx


def _build_system(cfg: EpisodeConfig, task: Any, grid: np.ndarray, x0s: np.ndarray,
                  states: np.ndarray, rng: np.random.Generator, key: StreamKey = None) -> SystemSample:
    n_observed = int(rng.integers(cfg.min_trajectories, cfg.max_trajectories + 1))
    target_idx, context_idx = [], []
    for j in range(len(x0s)):
        t_idx, c_idx = _subsample(cfg, len(grid), _stream(rng, key, j))
        target_idx.append(t_idx)
        context_idx.append(c_idx)
    return SystemSample(task=task, grid=grid, x0s=x0s, states=states, n_observed=n_observed,
                        target_idx=target_idx, context_idx=context_idx)


@dataclass
class PenicillinSystems:
    """Episode source drawing penicillin systems from a task distribution."""

    dist: TaskDistribution = field(default_factory=lambda: DEFAULT_DISTRIBUTIONS["on-task-train"])
    fixed: FixedParams = DEFAULT_FIXED
    solver: SolverSettings = DEFAULT_SOLVER
    state_dim: int = 4

    def sample(self, cfg: EpisodeConfig, rng: np.random.Generator, n_systems: int,
               key: StreamKey = None) -> Tuple[List[SystemSample], int]:
        """Simulate ``n_systems`` systems, resampling diverged ones.

        Args:
            key: when given, system i draws from its own stream keyed by
                (key, i, attempt) and trajectory j of it by (key, i, j), so a
                system does not depend on how many others share the batch

        Returns:
            the systems and the number of diverged system draws that were discarded
        """
        grid = np.linspace(0.0, self.solver.t_max, cfg.n_grid)
        systems: List[Optional[SystemSample]] = [None] * n_systems
        pending = list(range(n_systems))
        n_diverged = 0
        for attempt in range(cfg.max_retries + 1):
            streams = [_stream(rng, key, SYSTEM_STREAM, slot, attempt) for slot in pending]
            tasks = [sample_task(self.dist, s) for s in streams]
            recipes = [[sample_recipe(s, self.solver.t_max) for _ in range(cfg.n_x0)] for s in streams]
            x0s = np.array([[r.x0() for r in group] for group in recipes])
            feeds = np.array([[r.F for r in group] for group in recipes])
            rows = np.repeat(np.stack([t.as_array() for t in tasks]), cfg.n_x0, axis=0)
            states, diverged = simulate_batch(
                x0s.reshape(-1, 4), feeds.reshape(-1), rows, self.fixed, grid, self.solver
            )
            states = states.reshape(len(pending), cfg.n_x0, len(grid), 4)
            diverged = diverged.reshape(len(pending), cfg.n_x0).any(axis=1)
            still_pending = []
            for j, slot in enumerate(pending):
                if diverged[j]:
                    n_diverged += 1
                    still_pending.append(slot)
                    continue
                sub_key = None if key is None else (*key, SUBSAMPLE_STREAM, slot)
                systems[slot] = _build_system(cfg, tasks[j], grid, x0s[j], states[j], streams[j], sub_key)
            if still_pending:
                logger.warning(f"{len(still_pending)} system(s) diverged on attempt {attempt + 1}; resampling")
            pending = still_pending
            if not pending:
                return systems, n_diverged
        raise DivergedTrajectory(
            f"{len(pending)} system(s) still diverged after {cfg.max_retries} retries"
        )


@dataclass
class ExponentialDecayFamily:
    """Toy 1-D family x' = -r x with r ~ U[rate_low, rate_high]."""

    rate_low: float = 0.5
    rate_high: float = 1.5
    x0_low: float = 0.5
    x0_high: float = 2.0
    t_max: float = 5.0
    state_dim: int = 1

    def sample(self, cfg: EpisodeConfig, rng: np.random.Generator, n_systems: int,
               key: StreamKey = None) -> Tuple[List[SystemSample], int]:
        grid = np.linspace(0.0, self.t_max, cfg.n_grid)
        systems = []
        for i in range(n_systems):
            stream = _stream(rng, key, SYSTEM_STREAM, i, 0)
            rate = stream.uniform(self.rate_low, self.rate_high)
            x0s = stream.uniform(self.x0_low, self.x0_high, size=(cfg.n_x0, 1))
            states = x0s[:, None, :] * np.exp(-rate * grid)[None, :, None]
            sub_key = None if key is None else (*key, SUBSAMPLE_STREAM, i)
            systems.append(_build_system(cfg, rate, grid, x0s, states, stream, sub_key))
        return systems, 0


EpisodeSource = Union[PenicillinSystems, ExponentialDecayFamily]


def make_episode(system: SystemSample, k: int, scenario: Scenario, rng: np.random.Generator,
                 cfg: EpisodeConfig) -> Episode:
    """Build the episode whose update trajectory is ``k``.

    Forecast: trajectory k is new, its own context is withheld and C_update is
    its (t0, x0, x0) triple. Interpolate: C_update holds n_o further grid
    points of trajectory k; a trajectory that was not yet observed enters with
    its triple plus those points.
    """
    observed = range(system.n_observed)
    if scenario is Scenario.FORECAST:
        kept = [i for i in observed if i != k]
        context = [system.points(i, system.context_idx[i]) for i in kept]
        target = [system.points(i, system.target_idx[i]) for i in kept]
        update_context = system.points(k, [0])
        update_target = system.points(k, system.target_idx[k])
    else:
        context = [system.points(i, system.context_idx[i]) for i in observed]
        target = [system.points(i, system.target_idx[i]) for i in observed]
        already = system.context_idx[k] if k < system.n_observed else np.array([], dtype=int)
        candidates = np.setdiff1d(np.arange(1, len(system.grid)), already)
        n_update = int(rng.integers(cfg.min_update, cfg.max_update + 1))
        n_update = min(n_update, len(candidates))
        picked = np.sort(rng.choice(candidates, size=n_update, replace=False))
        if k >= system.n_observed:
            picked = np.concatenate([[0], picked])
        update_context = system.points(k, picked)
        target_union = np.union1d(np.union1d(system.target_idx[k], picked), already)
        update_target = system.points(k, target_union)
    return Episode(task=system.task, context=context, target=target, scenario=scenario,
                   update_context=update_context, update_target=update_target, update_index=k)


def generate_episode(cfg: EpisodeConfig, dist: TaskDistribution, rng: np.random.Generator,
                     fixed: FixedParams = DEFAULT_FIXED,
                     solver: SolverSettings = DEFAULT_SOLVER) -> Episode:
    """Sample a system, flip the scenario and apply its context update."""
    (system,), _ = PenicillinSystems(dist=dist, fixed=fixed, solver=solver).sample(cfg, rng, 1)
    scenario = scenario_flip(cfg.forecast_prob, rng)
    if scenario is Scenario.FORECAST:
        if system.n_observed < cfg.n_x0:
            k = system.n_observed
        else:
            k = int(rng.integers(system.n_observed))
    else:
        k = int(rng.integers(system.n_observed))
    return make_episode(system, k, scenario, rng, cfg)


def episodes_for_step(systems: Sequence[SystemSample], cfg: EpisodeConfig,
                      rng: np.random.Generator, key: StreamKey = None) -> List[Episode]:
    """One episode per (system, trajectory) pair with a fresh scenario flip each.

    With a ``key``, episode (i, k) draws from the stream keyed by (key, i, k).
    """
    episodes = []
    for i, system in enumerate(systems):
        for k in range(len(system.x0s)):
            stream = _stream(rng, key, EPISODE_STREAM, i, k)
            scenario = scenario_flip(cfg.forecast_prob, stream)
            episodes.append(make_episode(system, k, scenario, stream, cfg))
    return episodes


class EpisodeCache:
    """Columnar ``.npz`` cache of simulated systems with a self-describing header."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)

    def save(self, systems: Sequence[SystemSample]) -> None:
        if not systems:
            raise InvalidParameters("Nothing to cache")
        grid = systems[0].grid
        n_x0 = len(systems[0].x0s)
        max_len = max(len(idx) for s in systems for idx in s.target_idx)

        def padded(attr):
            out = np.full((len(systems), n_x0, max_len), -1, dtype=int)
            for i, s in enumerate(systems):
                for j, idx in enumerate(getattr(s, attr)):
                    out[i, j, :len(idx)] = idx
            return out

        header = {
            "schema_version": CACHE_SCHEMA_VERSION,
            "n_systems": len(systems),
            "n_x0": n_x0,
            "n_grid": len(grid),
            "state_dim": int(systems[0].states.shape[-1]),
        }
        self.path.parent.mkdir(parents=True, exist_ok=True)
        np.savez_compressed(
            self.path,
            header=np.array(json.dumps(header, sort_keys=True)),
            grid=grid,
            tasks=np.stack([np.atleast_1d(_task_vector(s.task)) for s in systems]),
            x0s=np.stack([s.x0s for s in systems]),
            states=np.stack([s.states for s in systems]),
            n_observed=np.array([s.n_observed for s in systems]),
            target_idx=padded("target_idx"),
            context_idx=padded("context_idx"),
        )
        logger.info(f"Cached {len(systems)} systems to {self.path}")

    def load(self) -> List[SystemSample]:
        with np.load(self.path, allow_pickle=False) as data:
            header = json.loads(str(data["header"]))
            if header.get("schema_version") != CACHE_SCHEMA_VERSION:
                raise InvalidParameters(f"Unsupported episode cache schema {header.get('schema_version')}")
            systems = []
            for i in range(header["n_systems"]):
                task_vec = data["tasks"][i]
                task = Task.from_array(task_vec) if len(task_vec) == 6 else float(task_vec[0])
                systems.append(SystemSample(
                    task=task,
                    grid=data["grid"],
                    x0s=data["x0s"][i],
                    states=data["states"][i],
                    n_observed=int(data["n_observed"][i]),
                    target_idx=[row[row >= 0] for row in data["target_idx"][i]],
                    context_idx=[row[row >= 0] for row in data["context_idx"][i]],
                ))
        return systems


def _task_vector(task: Any) -> np.ndarray:
    return task.as_array() if isinstance(task, Task) else np.array([float(task)])
