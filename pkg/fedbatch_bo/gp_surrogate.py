"""
FedBatchBO GP Surrogate Module

This module implements exact Gaussian-process regression on normalised recipe
inputs (B0, P0, S0, V0, F, t): an ARD RBF kernel, the log marginal likelihood
with analytic gradients, multi-start L-BFGS-B hyperparameter fitting and the
Cholesky-based posterior used by the GP-Standard and GP-Exp baselines.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize

from .dynamics import DEFAULT_SOLVER, RECIPE_BOUNDS, Recipe
from .errors import FitFailed, InvalidParameters

logger = logging.getLogger(__name__)

GP_INPUT_FIELDS = ("B0", "P0", "S0", "V0", "F", "t")
JITTER_LADDER = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)
LENGTHSCALE_RANGE = (1e-2, 1e2)


@dataclass(frozen=True)
class GpHyperparams:
    """ARD RBF hyperparameters."""

    lengthscales: Tuple[float, ...]
    signal_variance: float = 1.0
    noise_variance: float = 1e-6

    def __post_init__(self):
        ells = np.asarray(self.lengthscales, dtype=float)
        if ells.ndim != 1 or len(ells) == 0 or np.any(ells <= 0) or not np.all(np.isfinite(ells)):
            raise InvalidParameters(f"Lengthscales must be positive and finite, got {self.lengthscales}")
        if not self.signal_variance > 0 or not np.isfinite(self.signal_variance):
            raise InvalidParameters(f"Signal variance must be positive, got {self.signal_variance}")
        if not self.noise_variance >= 0 or not np.isfinite(self.noise_variance):
            raise InvalidParameters(f"Noise variance must be non-negative, got {self.noise_variance}")
        object.__setattr__(self, "lengthscales", tuple(float(v) for v in ells))

    @property
    def dim(self) -> int:
        return len(self.lengthscales)

    def to_log(self) -> np.ndarray:
        """[log l_1..log l_D, log sf2, log sn2]"""
        return np.log(np.concatenate([self.lengthscales, [self.signal_variance, max(self.noise_variance, 1e-300)]]))

    @classmethod
    def from_log(cls, log_params: Sequence[float]) -> "GpHyperparams":
        values = np.exp(np.asarray(log_params, dtype=float))
        return cls(lengthscales=tuple(values[:-2]), signal_variance=float(values[-2]),
                   noise_variance=float(values[-1]))


@dataclass(frozen=True)
class RecipeInputScaler:
    """Frozen [0, 1] normalisation of (B0, P0, S0, V0, F, t)."""

    lower: Tuple[float, ...]
    upper: Tuple[float, ...]

    @classmethod
    def default(cls, t_max: float = DEFAULT_SOLVER.t_max) -> "RecipeInputScaler":
        lower = [RECIPE_BOUNDS[name][0] for name in GP_INPUT_FIELDS[:-1]] + [0.0]
        upper = [RECIPE_BOUNDS[name][1] for name in GP_INPUT_FIELDS[:-1]] + [t_max]
        return cls(lower=tuple(lower), upper=tuple(upper))

    def transform(self, raw: np.ndarray) -> np.ndarray:
        raw = np.asarray(raw, dtype=float)
        return (raw - np.asarray(self.lower)) / (np.asarray(self.upper) - np.asarray(self.lower))

    def inverse(self, unit: np.ndarray) -> np.ndarray:
        unit = np.asarray(unit, dtype=float)
        return np.asarray(self.lower) + unit * (np.asarray(self.upper) - np.asarray(self.lower))

    def recipe_input(self, recipe: Recipe, t: Optional[float] = None) -> np.ndarray:
        """Normalised input for observing ``recipe`` at time t (default t_stop)."""
        t = recipe.t_stop if t is None else t
        return self.transform([recipe.B0, recipe.P0, recipe.S0, recipe.V0, recipe.F, t])


def _scaled_sq_dists(A: np.ndarray, B: np.ndarray, lengthscales: np.ndarray) -> np.ndarray:
    """Per-dimension squared distances ((a_d - b_d)/l_d)^2, shape (n, m, D)."""
    return ((A[:, None, :] - B[None, :, :]) / lengthscales) ** 2


def rbf_kernel(a: Sequence[float], b: Sequence[float], hyper: GpHyperparams) -> float:
    """signal_variance * exp(-0.5 * sum_d ((a_d - b_d) / l_d)^2)"""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != (hyper.dim,) or b.shape != (hyper.dim,):
        raise InvalidParameters(f"Inputs must have {hyper.dim} dimensions, got {a.shape} and {b.shape}")
    r2 = np.sum(((a - b) / np.asarray(hyper.lengthscales)) ** 2)
    return float(hyper.signal_variance * np.exp(-0.5 * r2))


def gram(A: np.ndarray, B: np.ndarray, hyper: GpHyperparams) -> np.ndarray:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape[1] != hyper.dim or B.shape[1] != hyper.dim:
        raise InvalidParameters(f"Inputs must have {hyper.dim} columns")
    d2 = _scaled_sq_dists(A, B, np.asarray(hyper.lengthscales)).sum(axis=-1)
    return hyper.signal_variance * np.exp(-0.5 * d2)


def _cholesky_with_jitter(K: np.ndarray, signal_variance: float) -> Tuple[np.ndarray, float]:
    for rel in JITTER_LADDER:
        jitter = rel * signal_variance
        try:
            L = cholesky(K + jitter * np.eye(len(K)), lower=True)
        except np.linalg.LinAlgError:
            continue
        if jitter > 0:
            logger.debug(f"Cholesky needed jitter {jitter:.3e}")
        return L, jitter
    raise FitFailed(f"Kernel matrix not positive definite after jitter {JITTER_LADDER[-1]:.0e} x signal variance")


@dataclass(frozen=True)
class GpModel:
    """A conditioned GP; immutable, so posterior queries are reentrant."""

    hyper: GpHyperparams
    X: np.ndarray
    y: np.ndarray
    y_mean: float
    chol: np.ndarray
    alpha: np.ndarray
    jitter: float = 0.0

    def posterior(self, query: Sequence[float]) -> Tuple[float, float]:
        means, variances = self.posterior_batch(np.asarray(query, dtype=float)[None, :])
        return float(means[0]), float(variances[0])

    def posterior_batch(self, Q: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Latent predictive mean and variance at each row of Q."""
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        k_star = gram(Q, self.X, self.hyper)
        means = k_star @ self.alpha + self.y_mean
        v = solve_triangular(self.chol, k_star.T, lower=True)
        variances = self.hyper.signal_variance - np.sum(v ** 2, axis=0)
        return means, np.clip(variances, 0.0, None)

    def log_marginal_likelihood(self) -> float:
        return float(log_marginal_likelihood(self.hyper.to_log(), self.X, self.y))


def condition(X: np.ndarray, y: np.ndarray, hyper: GpHyperparams) -> GpModel:
    """Condition a zero-mean GP on centred y for fixed hyperparameters."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if len(X) != len(y) or len(y) == 0:
        raise InvalidParameters(f"Need matching non-empty X and y, got {X.shape} and {y.shape}")
    y_mean = float(np.mean(y))
    yc = y - y_mean
    K = gram(X, X, hyper) + hyper.noise_variance * np.eye(len(X))
    L, jitter = _cholesky_with_jitter(K, hyper.signal_variance)
    alpha = cho_solve((L, True), yc)
    return GpModel(hyper=hyper, X=X, y=yc, y_mean=y_mean, chol=L, alpha=alpha, jitter=jitter)


def posterior(model: GpModel, query: Sequence[float]) -> Tuple[float, float]:
    return model.posterior(query)


def log_marginal_likelihood(log_params: np.ndarray, X: np.ndarray, y: np.ndarray,
                            eval_gradient: bool = False):
    """Log marginal likelihood of centred y, optionally with its log-space gradient.

    Returns -inf (and a zero gradient) when K is not positive definite.
    """
    log_params = np.asarray(log_params, dtype=float)
    X = np.atleast_2d(X)
    n, d = X.shape
    ells = np.exp(log_params[:d])
    sf2 = np.exp(log_params[d])
    sn2 = np.exp(log_params[d + 1])

    d2 = _scaled_sq_dists(X, X, ells)
    Kf = sf2 * np.exp(-0.5 * d2.sum(axis=-1))
    K = Kf + sn2 * np.eye(n)
    try:
        L = cholesky(K, lower=True)
    except np.linalg.LinAlgError:
        return (-np.inf, np.zeros_like(log_params)) if eval_gradient else -np.inf

    alpha = cho_solve((L, True), y)
    lml = -0.5 * y @ alpha - np.log(np.diag(L)).sum() - 0.5 * n * np.log(2 * np.pi)
    if not eval_gradient:
        return lml

    # 0.5 * tr((alpha alpha^T - K^-1) dK/dtheta)
    W = np.outer(alpha, alpha) - cho_solve((L, True), np.eye(n))
    grad = np.empty_like(log_params)
    grad[:d] = 0.5 * np.einsum("ij,ijk->k", W, Kf[:, :, None] * d2)
    grad[d] = 0.5 * np.sum(W * Kf)
    grad[d + 1] = 0.5 * sn2 * np.trace(W)
    return lml, grad


def hyper_bounds(dim: int, var_y: float) -> List[Tuple[float, float]]:
    """Log-space optimisation box, relative to the output variance."""
    ell = [(np.log(LENGTHSCALE_RANGE[0]), np.log(LENGTHSCALE_RANGE[1]))] * dim
    sf2 = (np.log(1e-4 * var_y), np.log(1e4 * var_y))
    sn2 = (np.log(max(1e-10 * var_y, 1e-12)), np.log(var_y))
    return ell + [sf2, sn2]


@dataclass
class FitReport:
    start_lml: List[float]
    end_lml: List[float]


def fit(X: np.ndarray, y: np.ndarray, init: Optional[GpHyperparams] = None, restarts: int = 5,
        rng: Optional[np.random.Generator] = None, maxiter: int = 200) -> GpModel:
    """Fit hyperparameters by multi-start L-BFGS-B on the log marginal likelihood.

    The first start is ``init`` (or a data-scaled default); the others are drawn
    uniformly inside the log-space bounds. A restart never returns a point
    worse than where it started.

    Args:
        X: normalised inputs, shape (n, D), n >= 2
        y: raw objective values, shape (n,)
        init: initial hyperparameters for the first restart
        restarts: number of starts, >= 1
        rng: generator for the random starts

    Returns:
        the GpModel conditioned on the best hyperparameters found
    """
    model, _ = fit_with_report(X, y, init=init, restarts=restarts, rng=rng, maxiter=maxiter)
    return model


def fit_with_report(X: np.ndarray, y: np.ndarray, init: Optional[GpHyperparams] = None, restarts: int = 5,
                    rng: Optional[np.random.Generator] = None, maxiter: int = 200) -> Tuple[GpModel, FitReport]:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if len(y) < 2 or len(X) != len(y):
        raise InvalidParameters(f"GP fit needs at least 2 matching points, got X {X.shape}, y {y.shape}")
    if restarts < 1:
        raise InvalidParameters(f"restarts must be >= 1, got {restarts}")
    rng = rng if rng is not None else np.random.default_rng(0)
    dim = X.shape[1]
    yc = y - y.mean()
    var_y = float(np.var(yc))
    if var_y <= 0.0 or not np.isfinite(var_y):
        var_y = 1.0

    bounds = hyper_bounds(dim, var_y)
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    if init is None:
        init = GpHyperparams(lengthscales=(0.5,) * dim, signal_variance=var_y, noise_variance=1e-4 * var_y)
    if init.dim != dim:
        raise InvalidParameters(f"Initial hyperparameters have {init.dim} lengthscales for {dim} inputs")

    def objective(theta):
        lml, grad = log_marginal_likelihood(theta, X, yc, eval_gradient=True)
        if not np.isfinite(lml):
            return 1e25, np.zeros_like(theta)
        return -lml, -grad

    starts = [np.clip(init.to_log(), lo, hi)]
    starts += [rng.uniform(lo, hi) for _ in range(restarts - 1)]
    report = FitReport(start_lml=[], end_lml=[])
    best_theta, best_lml = None, -np.inf
    for start in starts:
        start_lml = log_marginal_likelihood(start, X, yc)
        result = minimize(objective, start, jac=True, method="L-BFGS-B", bounds=bounds,
                          options={"maxiter": maxiter})
        theta, lml = result.x, -float(result.fun)
        if not np.isfinite(lml) or lml < start_lml:
            theta, lml = start, start_lml
        report.start_lml.append(float(start_lml))
        report.end_lml.append(float(lml))
        if lml > best_lml:
            best_theta, best_lml = theta, lml

    if best_theta is None:
        raise FitFailed("No restart produced a finite log marginal likelihood")
    hyper = GpHyperparams.from_log(best_theta)
    logger.debug(f"GP fit on {len(y)} points: lml={best_lml:.4f}, hyper={hyper}")
    return condition(X, y, hyper), report


def dump_csv(model: GpModel, path: Union[str, Path]) -> Path:
    """Debug dump of (X, y, hyperparameters) as one CSV."""
    path = Path(path)
    names = list(GP_INPUT_FIELDS) if model.hyper.dim == len(GP_INPUT_FIELDS) else [
        f"x{i}" for i in range(model.hyper.dim)]
    frame = pd.DataFrame(model.X, columns=names)
    frame["y"] = model.y + model.y_mean
    for name, ell in zip(names, model.hyper.lengthscales):
        frame[f"lengthscale_{name}"] = ell
    frame["signal_variance"] = model.hyper.signal_variance
    frame["noise_variance"] = model.hyper.noise_variance
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)
    return path
