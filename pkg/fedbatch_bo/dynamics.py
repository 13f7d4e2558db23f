"""
FedBatchBO Dynamics Module

This module contains the mechanistic penicillin fed-batch simulator: the
Contois/Monod rate laws, the mass-balance right-hand side, a fixed-step
classical Runge-Kutta integrator with non-negativity clamping, and the
profit objective.

State vectors are always ordered (B, P, S, V); kinetic parameter vectors are
ordered as ``TASK_FIELDS``.
"""

import logging
from dataclasses import dataclass, replace
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.integrate import trapezoid

from .errors import DivergedTrajectory, InvalidParameters

logger = logging.getLogger(__name__)

STATE_NAMES = ("B", "P", "S", "V")
TASK_FIELDS = ("k_B", "k_P", "k_m", "mu_max", "rho_max", "m_S")
RECIPE_FIELDS = ("B0", "P0", "S0", "V0", "F", "t_stop")

# Allowed ranges of the decision variables (t_stop is bounded by the solver horizon)
RECIPE_BOUNDS: Dict[str, Tuple[float, float]] = {
    "B0": (1.0, 5.0),
    "P0": (0.0, 3.0),
    "S0": (0.0, 10.0),
    "V0": (5.0, 8.5),
    "F": (0.0, 50.0),
}


@dataclass(frozen=True)
class Task:
    """Stochastic kinetic parameters of one black-box batch system.

    Defaults are the nominal (industry) values.
    """

    k_B: float = 0.006      # gS/gB, Contois saturation constant
    k_P: float = 0.0001     # gS/L, production saturation constant
    k_m: float = 0.0001     # gS/L, maintenance saturation constant
    mu_max: float = 0.11    # 1/hr
    rho_max: float = 0.0055  # gP/gB/hr
    m_S: float = 0.029      # gS/gB/hr

    def __post_init__(self):
        values = self.as_array()
        if not np.all(np.isfinite(values)) or np.any(values <= 0.0):
            raise InvalidParameters(f"Task parameters must be finite and positive, got {self}")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in TASK_FIELDS], dtype=float)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "Task":
        return cls(**{name: float(v) for name, v in zip(TASK_FIELDS, values)})

    def fingerprint(self) -> str:
        """Short stable identifier used in file names and manifests."""
        return "-".join(f"{v:.6g}" for v in self.as_array())


NOMINAL_TASK = Task()


@dataclass(frozen=True)
class FixedParams:
    """Fixed (non-stochastic) model parameters."""

    S_F: float = 500.0   # g/L, substrate concentration in feed
    K_deg: float = 0.01  # 1/hr, penicillin hydrolysis constant
    K_in: float = 0.1    # gS/L, substrate inhibition constant
    Y_BS: float = 0.47   # gB/gS
    Y_PS: float = 1.2    # gP/gS


@dataclass(frozen=True)
class SolverSettings:
    """Integrator settings shared by every simulation."""

    t_max: float = 150.0          # hr, batch horizon
    step: float = 0.05            # hr, RK4 step upper bound
    divergence_cap: float = 1e6   # any state component above this aborts
    n_grid: int = 100             # default output grid length

    def __post_init__(self):
        if self.t_max <= 0 or self.step <= 0 or self.divergence_cap <= 0 or self.n_grid < 2:
            raise InvalidParameters(f"Invalid solver settings: {self}")


@dataclass(frozen=True)
class ProfitCoefficients:
    """Coefficients of g = revenue*P*V - time_cost*t - feed_cost*int(F)."""

    revenue: float = 2.5e-2
    time_cost: float = 168.0
    feed_cost: float = 8.5e-4


@dataclass(frozen=True)
class ReactorState:
    """Concentrations B, P, S (g/L) and liquid volume V (L)."""

    B: float
    P: float
    S: float
    V: float

    def __post_init__(self):
        values = self.as_array()
        if not np.all(np.isfinite(values)) or np.any(values < 0.0):
            raise InvalidParameters(f"Reactor state must be finite and non-negative, got {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.B, self.P, self.S, self.V], dtype=float)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "ReactorState":
        B, P, S, V = (float(v) for v in values)
        return cls(B=B, P=P, S=S, V=V)


@dataclass(frozen=True)
class Recipe:
    """Decision vector of one batch: initial condition, constant feed and stopping time."""

    B0: float = 1.5
    P0: float = 0.0
    S0: float = 0.0
    V0: float = 7.0
    F: float = 25.0
    t_stop: float = 150.0

    def __post_init__(self):
        for name, (low, high) in RECIPE_BOUNDS.items():
            value = getattr(self, name)
            if not np.isfinite(value) or value < low or value > high:
                raise InvalidParameters(f"Recipe field {name}={value} outside [{low}, {high}]")
        if not np.isfinite(self.t_stop) or self.t_stop <= 0.0:
            raise InvalidParameters(f"Recipe t_stop must be positive, got {self.t_stop}")

    def check_horizon(self, t_max: float) -> None:
        if self.t_stop > t_max:
            raise InvalidParameters(f"Recipe t_stop={self.t_stop} exceeds horizon {t_max}")

    def initial_state(self) -> ReactorState:
        return ReactorState(B=self.B0, P=self.P0, S=self.S0, V=self.V0)

    def x0(self) -> np.ndarray:
        return np.array([self.B0, self.P0, self.S0, self.V0], dtype=float)

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in RECIPE_FIELDS], dtype=float)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "Recipe":
        return cls(**{name: float(v) for name, v in zip(RECIPE_FIELDS, values)})

    def with_stop(self, t_stop: float) -> "Recipe":
        return replace(self, t_stop=float(t_stop))


NOMINAL_RECIPE = Recipe()
DEFAULT_FIXED = FixedParams()
DEFAULT_SOLVER = SolverSettings()
DEFAULT_PROFIT = ProfitCoefficients()


@dataclass
class Trajectory:
    """One batch run: recipe, time grid and the (n, 4) state matrix on it."""

    recipe: Recipe
    times: np.ndarray
    states: np.ndarray
    task_id: Optional[str] = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim != 2 or self.states.shape != (len(self.times), len(STATE_NAMES)):
            raise InvalidParameters(
                f"states shape {self.states.shape} does not match {len(self.times)} times"
            )
        if len(self.times) == 0 or self.times[0] != 0.0:
            raise InvalidParameters("Trajectory times must start at 0")
        if np.any(np.diff(self.times) <= 0.0):
            raise InvalidParameters("Trajectory times must be strictly increasing")
        if not np.array_equal(self.states[0], self.recipe.x0()):
            raise InvalidParameters("First state must equal the recipe's initial condition")

    def __len__(self) -> int:
        return len(self.times)

    def state(self, index: int) -> ReactorState:
        return ReactorState.from_array(self.states[index])

    def profits(self, coeffs: ProfitCoefficients = DEFAULT_PROFIT) -> np.ndarray:
        """Profit of stopping the batch at each grid time."""
        return profit(self.states[:, 1], self.states[:, 3], self.times, self.recipe.F, coeffs)


def rates(state: ReactorState, task: Task,
          fixed: FixedParams = DEFAULT_FIXED) -> Tuple[float, float, float]:
    """Specific rates (mu, rho, gamma) of growth, production and maintenance.

    Args:
        state: current reactor state
        task: kinetic parameters
        fixed: fixed parameters (only K_in is used)

    Returns:
        (mu [1/hr], rho [gP/gB/hr], gamma [gS/gB/hr]); all exactly 0 when S = 0
    """
    mu, rho, gamma = _kinetics(
        np.array([state.B]), np.array([state.S]), task.as_array()[None, :], fixed
    )
    return float(mu[0]), float(rho[0]), float(gamma[0])


def rhs(state: ReactorState, task: Task, fixed: FixedParams, F: float) -> "_Derivative":
    """Time derivatives (dB, dP, dS, dV) of the mass balances.

    The result is returned as a ``ReactorState``-shaped tuple of derivatives;
    derivatives may be negative so it is built without validation.
    """
    if F < 0 or not np.isfinite(F):
        raise InvalidParameters(f"Feed rate must be non-negative, got {F}")
    if state.V <= 0.0:
        raise InvalidParameters("Reactor volume must be positive to evaluate dilution terms")
    derivative = _rhs_array(
        state.as_array()[None, :], np.array([float(F)]), task.as_array()[None, :], fixed
    )[0]
    return _Derivative(*derivative)


@dataclass(frozen=True)
class _Derivative:
    B: float
    P: float
    S: float
    V: float

    def as_array(self) -> np.ndarray:
        return np.array([self.B, self.P, self.S, self.V], dtype=float)


def _kinetics(B: np.ndarray, S: np.ndarray, K: np.ndarray, fixed: FixedParams):
    k_B, k_P, k_m, mu_max, rho_max, m_S = K.T
    positive = S > 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        mu = np.where(positive, mu_max * S / (k_B * B + S), 0.0)
        rho = np.where(positive, rho_max * S / (k_P + S * (1.0 + S / fixed.K_in)), 0.0)
        gamma = np.where(positive, m_S * S / (k_m + S), 0.0)
    return mu, rho, gamma


def _rhs_array(x: np.ndarray, F: np.ndarray, K: np.ndarray, fixed: FixedParams) -> np.ndarray:
    B, P, S, V = x.T
    mu, rho, gamma = _kinetics(B, S, K, fixed)
    dilution = F / (fixed.S_F * V)
    dB = mu * B - B * dilution
    dP = rho * B - fixed.K_deg * P - P * dilution
    dS = (-mu * B / fixed.Y_BS - rho * B / fixed.Y_PS - gamma * B
          + (1.0 - S / fixed.S_F) * F / V)
    dV = F / fixed.S_F
    return np.stack([dB, dP, dS, dV], axis=-1)


def _check_grid(grid: np.ndarray) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or len(grid) < 1:
        raise InvalidParameters("Time grid must be a non-empty 1-D sequence")
    if np.any(np.diff(grid) <= 0.0):
        raise InvalidParameters("Time grid must be strictly increasing")
    return grid


def _integrate(x0: np.ndarray, F: np.ndarray, K: np.ndarray, fixed: FixedParams,
               grid: np.ndarray, settings: SolverSettings) -> Tuple[np.ndarray, np.ndarray]:
    """Classical RK4 over a batch of rows.

    Returns:
        states of shape (n_rows, len(grid), 4) and, per row, the index of the
        first grid point that could not be reached (-1 when the row is valid).
        Diverged rows are frozen at their last valid grid state.
    """
    n_rows = x0.shape[0]
    out = np.empty((len(grid), n_rows, len(STATE_NAMES)))
    out[0] = x0
    x = x0.copy()
    alive = np.ones(n_rows, dtype=bool)
    first_bad = np.full(n_rows, -1, dtype=int)

    def f(y):
        return _rhs_array(y, F, K, fixed)

    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(1, len(grid)):
            interval = grid[i] - grid[i - 1]
            n_sub = max(1, int(np.ceil(interval / settings.step - 1e-9)))
            h = interval / n_sub
            bad = np.zeros(n_rows, dtype=bool)
            for _ in range(n_sub):
                k1 = f(x)
                k2 = f(x + 0.5 * h * k1)
                k3 = f(x + 0.5 * h * k2)
                k4 = f(x + h * k3)
                x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
                np.maximum(x, 0.0, out=x)
                bad |= ~np.all(np.isfinite(x), axis=1) | np.any(x > settings.divergence_cap, axis=1)
            newly = bad & alive
            if newly.any():
                first_bad[newly] = i
                alive &= ~newly
            x[~alive] = out[i - 1][~alive]
            out[i] = x
    return np.transpose(out, (1, 0, 2)), first_bad


def integrate_from(state: np.ndarray, F: float, task: Task, fixed: FixedParams,
                   grid: Sequence[float], settings: SolverSettings = DEFAULT_SOLVER) -> np.ndarray:
    """Continue a batch from ``state`` at time ``grid[0]``; returns (len(grid), 4) states."""
    grid = _check_grid(np.asarray(grid, dtype=float))
    x0 = np.asarray(state, dtype=float)[None, :]
    states, first_bad = _integrate(x0, np.array([float(F)]), task.as_array()[None, :],
                                   fixed, grid, settings)
    if first_bad[0] >= 0:
        raise DivergedTrajectory(
            f"State exceeded divergence cap before t={grid[first_bad[0]]:.4g} hr",
            partial=states[0, :first_bad[0]], time=float(grid[first_bad[0]]),
        )
    return states[0]


def simulate(recipe: Recipe, task: Task, fixed: FixedParams = DEFAULT_FIXED,
             grid: Optional[Sequence[float]] = None,
             settings: SolverSettings = DEFAULT_SOLVER,
             task_id: Optional[str] = None) -> Trajectory:
    """Simulate one batch run on ``grid`` (default: ``n_grid`` points over [0, t_stop]).

    Raises:
        DivergedTrajectory: carrying the valid prefix as ``partial``
    """
    if grid is None:
        grid = np.linspace(0.0, recipe.t_stop, settings.n_grid)
    grid = _check_grid(grid)
    if grid[0] != 0.0:
        raise InvalidParameters("Simulation grid must start at t = 0")
    if grid[-1] < recipe.t_stop * (1.0 - 1e-12):
        raise InvalidParameters(f"Simulation grid ends at {grid[-1]} before t_stop={recipe.t_stop}")

    states, first_bad = _integrate(recipe.x0()[None, :], np.array([recipe.F]),
                                   task.as_array()[None, :], fixed, grid, settings)
    if first_bad[0] >= 0:
        cut = int(first_bad[0])
        partial = Trajectory(recipe, grid[:cut], states[0, :cut], task_id) if cut > 0 else None
        logger.debug(f"Trajectory diverged at t={grid[cut]:.4g} hr for task {task.fingerprint()}")
        raise DivergedTrajectory(
            f"State exceeded divergence cap {settings.divergence_cap:g} before t={grid[cut]:.4g} hr",
            partial=partial, time=float(grid[cut]),
        )
    return Trajectory(recipe=recipe, times=grid, states=states[0], task_id=task_id)


def simulate_batch(x0s: np.ndarray, feeds: np.ndarray,
                   tasks: Union[Sequence[Task], np.ndarray], fixed: FixedParams,
                   grid: Sequence[float],
                   settings: SolverSettings = DEFAULT_SOLVER) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorised simulation of many (x0, F, task) rows on a shared grid.

    Returns:
        states (n_rows, len(grid), 4) and a boolean diverged mask (n_rows,)
    """
    x0s = np.atleast_2d(np.asarray(x0s, dtype=float))
    feeds = np.broadcast_to(np.asarray(feeds, dtype=float), (x0s.shape[0],)).copy()
    if isinstance(tasks, np.ndarray):
        K = np.broadcast_to(np.atleast_2d(tasks), (x0s.shape[0], len(TASK_FIELDS))).copy()
    else:
        K = np.stack([t.as_array() for t in tasks])
    grid = _check_grid(grid)
    states, first_bad = _integrate(x0s, feeds, K, fixed, grid, settings)
    return states, first_bad >= 0


def profit(P, V, t, F, coeffs: ProfitCoefficients = DEFAULT_PROFIT):
    """Profit of a batch stopped at time t under constant feed F.

    Works elementwise on numpy arrays; the feed integral is F*t in closed form.
    """
    return coeffs.revenue * P * V - coeffs.time_cost * t - coeffs.feed_cost * F * t


def profit_quadrature(P: float, V: float, times: Sequence[float], feed: Sequence[float],
                      coeffs: ProfitCoefficients = DEFAULT_PROFIT) -> float:
    """Profit at ``times[-1]`` for a recorded (possibly time-varying) feed profile."""
    times = np.asarray(times, dtype=float)
    feed_total = trapezoid(np.asarray(feed, dtype=float), times)
    return float(coeffs.revenue * P * V - coeffs.time_cost * times[-1] - coeffs.feed_cost * feed_total)


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO)
    trajectory = simulate(NOMINAL_RECIPE, NOMINAL_TASK)
    for name, value in zip(STATE_NAMES, trajectory.states[-1]):
        print(f"{name}(t={trajectory.times[-1]:.0f} hr) = {value:.6g}")
    print(f"profit = {trajectory.profits()[-1]:.2f}")
