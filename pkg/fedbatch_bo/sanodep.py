"""
FedBatchBO SANODEP Module

This module implements the System-Aware Neural ODE Process surrogate: a
mean-aggregated point encoder producing the latent control signal d, an
initial-state encoder producing l(t0, x0), a latent ODE integrated by
unrolled RK4, a decoder with a shared observation variance, the bi-scenario
ELBO and the episodic meta-training loop.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from torch import nn

from .dynamics import DEFAULT_SOLVER, RECIPE_BOUNDS, FixedParams, SolverSettings
from .errors import (
    DivergedTrajectory,
    InvalidParameters,
    NonFiniteLatent,
    TrainingAborted,
)
from .neural_core import (
    MLP,
    DiagGaussian,
    grad,
    kl_diag,
    load_checkpoint,
    make_optimizer,
    opt_step,
    sample_reparam,
    save_checkpoint,
    standard_normal,
)
from .tasking import (
    Episode,
    EpisodeConfig,
    EpisodeSource,
    ExponentialDecayFamily,
    PenicillinSystems,
    TaskDistribution,
    TrajectoryPoints,
    episode_rng,
    episodes_for_step,
)

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "sanodep.pt"
TRAINING_LOG_NAME = "training_log.csv"
LOG_COLUMNS = ["step", "loss", "kl_d", "kl_l0", "log_likelihood", "diverged"]

_DTYPES = {"float64": torch.float64, "float32": torch.float32}


@dataclass(frozen=True)
class StateScaler:
    """Fixed standardisation (x - centre) / scale and t / t_max."""

    centre: Tuple[float, ...]
    scale: Tuple[float, ...]
    t_max: float

    @classmethod
    def penicillin(cls, t_max: float = DEFAULT_SOLVER.t_max) -> "StateScaler":
        names = ("B0", "P0", "S0", "V0")
        lo = np.array([RECIPE_BOUNDS[n][0] for n in names])
        hi = np.array([RECIPE_BOUNDS[n][1] for n in names])
        return cls(centre=tuple((lo + hi) / 2), scale=tuple((hi - lo) / 2), t_max=t_max)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "StateScaler":
        return cls(centre=tuple(data["centre"]), scale=tuple(data["scale"]), t_max=float(data["t_max"]))

    def to_dict(self) -> Dict[str, Any]:
        return {"centre": list(self.centre), "scale": list(self.scale), "t_max": self.t_max}

    @property
    def state_dim(self) -> int:
        return len(self.centre)

    def normalise(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - np.asarray(self.centre)) / np.asarray(self.scale)

    def denormalise(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(self.centre) + np.asarray(z) * np.asarray(self.scale)


def scaler_for(source: EpisodeSource) -> StateScaler:
    if isinstance(source, ExponentialDecayFamily):
        centre = (source.x0_low + source.x0_high) / 2
        return StateScaler(centre=(centre,), scale=((source.x0_high - source.x0_low) / 2,), t_max=source.t_max)
    return StateScaler.penicillin(source.solver.t_max)


def describe_source(source: EpisodeSource) -> Dict[str, Any]:
    if isinstance(source, ExponentialDecayFamily):
        return {"kind": "exponential-decay", **asdict(source)}
    dist = source.dist
    return {"kind": "penicillin", "name": dist.name, "offset": dist.offset, "window": dist.window,
            "fixed": asdict(source.fixed), "solver": asdict(source.solver)}


def source_from_description(data: Dict[str, Any]) -> EpisodeSource:
    data = dict(data)
    kind = data.pop("kind")
    if kind == "exponential-decay":
        return ExponentialDecayFamily(**data)
    if "fixed" not in data or "solver" not in data:
        raise InvalidParameters("Checkpoint does not record the fixed parameters and solver of its source")
    return PenicillinSystems(
        dist=TaskDistribution(offset=data["offset"], window=data["window"], name=data["name"]),
        fixed=FixedParams(**data["fixed"]),
        solver=SolverSettings(**data["solver"]),
    )


@dataclass(frozen=True)
class SanodepConfig:
    """Network sizes and training settings; lambda lives in ``episodes.forecast_prob``."""

    n_l: int = 16
    n_d: int = 16
    encoder_widths: Tuple[int, ...] = (128, 128)
    r_dim: int = 128
    ode_widths: Tuple[int, ...] = (128, 128)
    decoder_widths: Tuple[int, ...] = (128, 128)
    activation: str = "tanh"
    learning_rate: float = 1e-3
    steps: int = 3000
    n_mc: int = 1
    substeps: int = 25
    clip_norm: float = 10.0
    obs_var_init: float = 0.01
    max_divergence_rate: float = 0.5
    checkpoint_every: int = 500
    log_every: int = 50
    dtype: str = "float64"
    episodes: EpisodeConfig = field(default_factory=EpisodeConfig)

    def __post_init__(self):
        for name in ("encoder_widths", "ode_widths", "decoder_widths"):
            object.__setattr__(self, name, tuple(int(w) for w in getattr(self, name)))
        problems = []
        if self.n_l < 1 or self.n_d < 1 or self.r_dim < 1:
            problems.append("n_l, n_d and r_dim must be >= 1")
        if any(w < 1 for w in self.encoder_widths + self.ode_widths + self.decoder_widths):
            problems.append("widths must be positive")
        if self.learning_rate <= 0 or self.steps < 0 or self.n_mc < 1 or self.substeps < 1:
            problems.append("need learning_rate > 0, steps >= 0, n_mc >= 1, substeps >= 1")
        if not 0.0 < self.max_divergence_rate <= 1.0 or self.obs_var_init <= 0:
            problems.append("need 0 < max_divergence_rate <= 1 and obs_var_init > 0")
        if self.checkpoint_every < 1 or self.log_every < 1:
            problems.append("checkpoint_every and log_every must be >= 1")
        if self.dtype not in _DTYPES:
            problems.append(f"dtype must be one of {sorted(_DTYPES)}")
        if problems:
            raise InvalidParameters(f"Invalid SANODEP config: {'; '.join(problems)}")

    @property
    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype]

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        for name in ("encoder_widths", "ode_widths", "decoder_widths"):
            data[name] = list(data[name])
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SanodepConfig":
        data = dict(data)
        episodes = EpisodeConfig(**data.pop("episodes", {}))
        return cls(episodes=episodes, **data)


@dataclass
class PredictiveBatch:
    """Predictions in physical units for C candidates at T query times.

    mean and variance summarise the sample mixture (variance includes the
    observation noise); mean_samples are decoder means per latent sample and
    samples add observation noise to them. Sample arrays are (S, C, T, d).
    """

    x0s: np.ndarray
    times: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    mean_samples: np.ndarray
    samples: np.ndarray

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.variance)


def _canonical(rows: np.ndarray) -> np.ndarray:
    """Lexicographic row order so set encodings do not depend on input order."""
    return rows[np.lexsort(rows.T[::-1])]


class SanodepModel(nn.Module):
    """Encoders, latent ODE and decoder of the SANODEP surrogate."""

    def __init__(self, config: SanodepConfig, scaler: StateScaler, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.config = config
        self.scaler = scaler
        dx = scaler.state_dim
        dtype = config.torch_dtype
        act = config.activation
        self.point_encoder = MLP(1 + 2 * dx, config.encoder_widths, config.r_dim, act, dtype, generator)
        self.d_head = MLP(config.r_dim, (), 2 * config.n_d, act, dtype, generator)
        self.l0_encoder = MLP(1 + dx, config.encoder_widths, 2 * config.n_l, act, dtype, generator)
        self.ode_net = MLP(config.n_l + config.n_d + 1 + dx, config.ode_widths, config.n_l, act, dtype, generator)
        self.decoder = MLP(config.n_l + 1 + dx, config.decoder_widths, dx, act, dtype, generator)
        self.obs_logvar = nn.Parameter(torch.tensor(math.log(config.obs_var_init), dtype=dtype))

    @property
    def dtype(self) -> torch.dtype:
        return self.config.torch_dtype

    def _tensor(self, array) -> torch.Tensor:
        return torch.as_tensor(np.asarray(array, dtype=float), dtype=self.dtype)

    # encoding

    def _point_features(self, points: TrajectoryPoints) -> np.ndarray:
        n = len(points)
        x0n = np.broadcast_to(self.scaler.normalise(points.x0), (n, self.scaler.state_dim))
        return np.column_stack([points.times / self.scaler.t_max, x0n, self.scaler.normalise(points.states)])

    def _pack_sets(self, sets: Sequence[Sequence[TrajectoryPoints]]) -> Tuple[torch.Tensor, torch.Tensor]:
        feats = []
        for point_set in sets:
            rows = [self._point_features(p) for p in point_set if len(p) > 0]
            if not rows:
                raise InvalidParameters("Cannot encode an empty context")
            feats.append(_canonical(np.concatenate(rows)))
        width = feats[0].shape[1]
        n_max = max(len(f) for f in feats)
        packed = np.zeros((len(feats), n_max, width))
        mask = np.zeros((len(feats), n_max))
        for i, f in enumerate(feats):
            packed[i, :len(f)] = f
            mask[i, :len(f)] = 1.0
        return self._tensor(packed), self._tensor(mask)

    def _aggregate(self, feats: torch.Tensor, mask: torch.Tensor) -> DiagGaussian:
        h = self.point_encoder(feats)
        r = (h * mask[..., None]).sum(dim=1) / mask.sum(dim=1, keepdim=True)
        mean, logvar = self.d_head(r).split(self.config.n_d, dim=-1)
        return DiagGaussian(mean, logvar)

    def _l0(self, x0n: torch.Tensor) -> DiagGaussian:
        inputs = torch.cat([torch.zeros_like(x0n[:, :1]), x0n], dim=-1)
        mean, logvar = self.l0_encoder(inputs).split(self.config.n_l, dim=-1)
        return DiagGaussian(mean, logvar)

    def encode_sets(self, sets: Sequence[Sequence[TrajectoryPoints]]) -> DiagGaussian:
        """q(d | C) for each context set in a batch, shape (B, n_d)."""
        return self._aggregate(*self._pack_sets(sets))

    def encode(self, context: Sequence[TrajectoryPoints]) -> Tuple[DiagGaussian, List[DiagGaussian]]:
        """q_D for the whole context and q_L for each distinct trajectory in it."""
        q_d = self.encode_sets([context])
        q_d = DiagGaussian(q_d.mean[0], q_d.logvar[0])
        seen, x0s = set(), []
        for points in context:
            key = tuple(np.asarray(points.x0, dtype=float))
            if key not in seen:
                seen.add(key)
                x0s.append(points.x0)
        q_l = self._l0(self._tensor(self.scaler.normalise(np.stack(x0s))))
        return q_d, [DiagGaussian(m, v) for m, v in zip(q_l.mean, q_l.logvar)]

    # latent dynamics

    def _field(self, latent: torch.Tensor, d: torch.Tensor, tau: torch.Tensor, x0n: torch.Tensor) -> torch.Tensor:
        return self.ode_net(torch.cat([latent, d, tau[:, None], x0n], dim=-1))

    def _evolve(self, l0: torch.Tensor, d: torch.Tensor, x0n: torch.Tensor, taus: torch.Tensor,
                substeps: Optional[int] = None) -> torch.Tensor:
        """Unrolled RK4 in normalised time; taus is (B, T) with taus[:, 0] the start."""
        substeps = substeps or self.config.substeps
        latent = l0
        path = [l0]
        for j in range(1, taus.shape[1]):
            tau = taus[:, j - 1]
            h = (taus[:, j] - tau) / substeps
            hc = h[:, None]
            for _ in range(substeps):
                k1 = self._field(latent, d, tau, x0n)
                k2 = self._field(latent + 0.5 * hc * k1, d, tau + 0.5 * h, x0n)
                k3 = self._field(latent + 0.5 * hc * k2, d, tau + 0.5 * h, x0n)
                k4 = self._field(latent + hc * k3, d, tau + h, x0n)
                latent = latent + hc / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
                tau = tau + h
            if not torch.isfinite(latent).all():
                raise NonFiniteLatent(f"Latent state became non-finite after interval {j}")
            path.append(latent)
        return torch.stack(path, dim=1)

    def evolve_latent(self, l0: torch.Tensor, d: torch.Tensor, x0: Sequence[float], times: Sequence[float],
                      substeps: Optional[int] = None) -> torch.Tensor:
        """Latent trajectory (T, n_l) at physical ``times``, starting at times[0]."""
        times = np.asarray(times, dtype=float)
        if times.ndim != 1 or len(times) == 0 or np.any(np.diff(times) < 0):
            raise InvalidParameters("times must be a non-empty non-decreasing sequence")
        x0n = self._tensor(self.scaler.normalise(x0))[None, :]
        taus = self._tensor(times / self.scaler.t_max)[None, :]
        return self._evolve(l0.reshape(1, -1), d.reshape(1, -1), x0n, taus, substeps)[0]

    # decoding

    def _decode_normalised(self, latents: torch.Tensor, taus: torch.Tensor, x0n: torch.Tensor) -> torch.Tensor:
        x0_rep = x0n[:, None, :].expand(-1, latents.shape[1], -1)
        return self.decoder(torch.cat([latents, taus[..., None], x0_rep], dim=-1))

    def decode(self, latent: torch.Tensor, x0: Sequence[float], t: float) -> DiagGaussian:
        """Predictive Gaussian over the state in physical units.

        The normalised-space variance is exp(obs_logvar) on every dimension.
        """
        x0n = self._tensor(self.scaler.normalise(x0))[None, :]
        taus = self._tensor([[t / self.scaler.t_max]])
        mean_n = self._decode_normalised(latent.reshape(1, 1, -1), taus, x0n)[0, 0]
        scale = self._tensor(self.scaler.scale)
        centre = self._tensor(self.scaler.centre)
        return DiagGaussian(centre + scale * mean_n, self.obs_logvar + 2.0 * torch.log(scale))

    # training objective

    def _pack_targets(self, targets: Sequence[TrajectoryPoints]) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        n_max = max(len(t) for t in targets)
        dx = self.scaler.state_dim
        taus = np.zeros((len(targets), n_max + 1))
        states = np.zeros((len(targets), n_max, dx))
        mask = np.zeros((len(targets), n_max))
        for i, target in enumerate(targets):
            order = np.argsort(target.times, kind="stable")
            n = len(target)
            taus[i, 1:n + 1] = target.times[order] / self.scaler.t_max
            taus[i, n + 1:] = taus[i, n]
            states[i, :n] = self.scaler.normalise(target.states[order])
            mask[i, :n] = 1.0
        return self._tensor(taus), self._tensor(states), self._tensor(mask)

    def elbo_terms(self, episodes: Sequence[Episode], generator: Optional[torch.Generator] = None
                   ) -> Dict[str, torch.Tensor]:
        """Batch-mean negative ELBO and its parts for a list of episodes.

        The control posterior is conditioned on C + C_update + T_update and
        regularised towards q(d | C + C_update); the new trajectory's initial
        latent is regularised towards N(0, I).
        """
        if not episodes:
            raise InvalidParameters("No episodes to evaluate")
        n_mc = self.config.n_mc
        q_ctx = self.encode_sets([e.full_context() for e in episodes])
        q_full = self.encode_sets([e.full_context() + [e.update_target] for e in episodes])
        x0n = self._tensor(self.scaler.normalise(np.stack([e.update_target.x0 for e in episodes])))
        q_l = self._l0(x0n)
        taus, y_n, mask = self._pack_targets([e.update_target for e in episodes])

        batch = len(episodes)
        eps_d = torch.randn(n_mc, batch, self.config.n_d, generator=generator, dtype=self.dtype)
        eps_l = torch.randn(n_mc, batch, self.config.n_l, generator=generator, dtype=self.dtype)
        d = sample_reparam(q_full, eps_d).reshape(n_mc * batch, -1)
        l0 = sample_reparam(q_l, eps_l).reshape(n_mc * batch, -1)
        taus_rep = taus.repeat(n_mc, 1)
        x0_rep = x0n.repeat(n_mc, 1)
        latents = self._evolve(l0, d, x0_rep, taus_rep)
        mean_n = self._decode_normalised(latents[:, 1:], taus_rep[:, 1:], x0_rep)
        obs = DiagGaussian(mean_n, self.obs_logvar.expand_as(mean_n))
        log_lik = (obs.log_prob(y_n.repeat(n_mc, 1, 1)) * mask.repeat(n_mc, 1)).sum(dim=-1)
        log_lik = log_lik.reshape(n_mc, batch).mean(dim=0)

        kl_d = kl_diag(q_full, q_ctx)
        kl_l0 = kl_diag(q_l, standard_normal(q_l.mean.shape, self.dtype))
        loss = (-log_lik + kl_d + kl_l0).mean()
        return {"loss": loss, "log_likelihood": log_lik.mean(), "kl_d": kl_d, "kl_l0": kl_l0}

    def elbo_loss(self, episodes: Union[Episode, Sequence[Episode]],
                  generator: Optional[torch.Generator] = None) -> torch.Tensor:
        if isinstance(episodes, Episode):
            episodes = [episodes]
        return self.elbo_terms(episodes, generator)["loss"]

    # prediction

    def predict_many(self, context: Sequence[TrajectoryPoints], x0s: np.ndarray, times: np.ndarray,
                     n_samples: int = 32, generator: Optional[torch.Generator] = None,
                     with_initial: bool = True) -> PredictiveBatch:
        """Sample predictions for several candidate trajectories sharing one context.

        Args:
            context: observations gathered so far, possibly empty
            x0s: candidate initial states, shape (C, d)
            times: query times, shape (T,) or (C, T), all >= t0 = 0
            n_samples: number of latent (d, l0) draws
            generator: torch generator for the draws
            with_initial: add each candidate's (t0, x0, x0) triple to its context

        Returns:
            PredictiveBatch in physical units
        """
        x0s = np.atleast_2d(np.asarray(x0s, dtype=float))
        n_cand = len(x0s)
        times = np.broadcast_to(np.asarray(times, dtype=float), (n_cand, np.shape(times)[-1])).copy()
        if np.any(times < 0.0):
            raise InvalidParameters("Query times must not precede t0 = 0")
        if n_samples < 1:
            raise InvalidParameters(f"n_samples must be >= 1, got {n_samples}")
        generator = generator if generator is not None else torch.Generator().manual_seed(0)

        sets = [list(context) + ([TrajectoryPoints.initial(x0)] if with_initial else []) for x0 in x0s]
        order = np.argsort(times, axis=1, kind="stable")
        inverse = np.argsort(order, axis=1, kind="stable")
        sorted_t = np.take_along_axis(times, order, axis=1)
        dx = self.scaler.state_dim
        with torch.no_grad():
            q_d = self.encode_sets(sets)
            x0n = self._tensor(self.scaler.normalise(x0s))
            q_l = self._l0(x0n)
            eps_d = torch.randn(n_samples, n_cand, self.config.n_d, generator=generator, dtype=self.dtype)
            eps_l = torch.randn(n_samples, n_cand, self.config.n_l, generator=generator, dtype=self.dtype)
            eps_y = torch.randn(n_samples, n_cand, times.shape[1], dx, generator=generator, dtype=self.dtype)
            d = sample_reparam(q_d, eps_d).reshape(n_samples * n_cand, -1)
            l0 = sample_reparam(q_l, eps_l).reshape(n_samples * n_cand, -1)
            taus = torch.cat([torch.zeros(n_cand, 1, dtype=self.dtype),
                              self._tensor(sorted_t / self.scaler.t_max)], dim=1).repeat(n_samples, 1)
            x0_rep = x0n.repeat(n_samples, 1)
            latents = self._evolve(l0, d, x0_rep, taus)
            mean_n = self._decode_normalised(latents[:, 1:], taus[:, 1:], x0_rep)
            mean_n = mean_n.reshape(n_samples, n_cand, -1, dx).numpy()
            obs_std = float(torch.exp(0.5 * self.obs_logvar))
            noise = eps_y.numpy()

        mean_n = np.take_along_axis(mean_n, inverse[None, :, :, None], axis=2)
        scale = np.asarray(self.scaler.scale)
        mean_samples = self.scaler.denormalise(mean_n)
        samples = mean_samples + obs_std * scale * noise
        mixture_mean = mean_samples.mean(axis=0)
        variance = mean_samples.var(axis=0) + (obs_std * scale) ** 2
        return PredictiveBatch(x0s=x0s, times=times, mean=mixture_mean, variance=variance,
                               mean_samples=mean_samples, samples=samples)

    def predict(self, context: Sequence[TrajectoryPoints], x0: Sequence[float], times: Sequence[float],
                n_samples: int = 32, generator: Optional[torch.Generator] = None,
                with_initial: bool = True) -> PredictiveBatch:
        """Forecast (context holds only the triple) or interpolate one trajectory."""
        return self.predict_many(context, np.asarray(x0, dtype=float)[None, :], np.asarray(times, dtype=float),
                                 n_samples, generator, with_initial)

    # persistence

    @classmethod
    def from_checkpoint(cls, path: Union[str, Path]) -> "SanodepModel":
        payload = load_checkpoint(path)
        meta = payload["metadata"]
        model = cls(SanodepConfig.from_dict(meta["config"]), StateScaler.from_dict(meta["scaler"]))
        load_checkpoint(path, model)
        model.eval()
        return model


def _torch_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(step), 1]).generate_state(1)[0])


class Trainer:
    """Episodic meta-training: every step draws N_sys systems x N_x0 episodes,
    evaluates the batch-mean loss and applies one clipped Adam update.

    All randomness of step k is keyed by (seed, k), so resuming from a
    checkpoint reproduces an uninterrupted run exactly.
    """

    def __init__(self, config: SanodepConfig, source: Optional[EpisodeSource] = None, seed: int = 0):
        self.config = config
        self.source = source if source is not None else PenicillinSystems()
        self.seed = int(seed)
        self.scaler = scaler_for(self.source)
        self.model = SanodepModel(config, self.scaler, torch.Generator().manual_seed(self.seed))
        self.params = list(self.model.parameters())
        self.optimizer = make_optimizer(self.params, config.learning_rate)
        self.step = 0
        self.history: List[Dict[str, float]] = []

    def train_step(self) -> Dict[str, float]:
        cfg = self.config.episodes
        key = (self.seed, self.step)
        rng = episode_rng(*key)
        try:
            systems, n_diverged = self.source.sample(cfg, rng, cfg.n_sys, key=key)
        except DivergedTrajectory as e:
            raise TrainingAborted(f"Step {self.step}: {e}") from e
        rate = n_diverged / (n_diverged + cfg.n_sys)
        if rate > self.config.max_divergence_rate:
            raise TrainingAborted(
                f"Step {self.step}: {n_diverged} of {n_diverged + cfg.n_sys} system draws diverged"
            )
        episodes = episodes_for_step(systems, cfg, rng, key=key)
        generator = torch.Generator().manual_seed(_torch_seed(self.seed, self.step))
        terms: Dict[str, torch.Tensor] = {}

        def loss_fn():
            terms.update(self.model.elbo_terms(episodes, generator))
            return terms["loss"]

        loss, grads = grad(loss_fn, self.params)
        opt_step(self.params, grads, self.optimizer, self.config.clip_norm)
        row = {
            "step": self.step,
            "loss": float(loss),
            "kl_d": float(terms["kl_d"].mean()),
            "kl_l0": float(terms["kl_l0"].mean()),
            "log_likelihood": float(terms["log_likelihood"]),
            "diverged": int(n_diverged),
        }
        self.history.append(row)
        self.step += 1
        return row

    def run(self, steps: Optional[int] = None, out_dir: Optional[Union[str, Path]] = None) -> SanodepModel:
        """Train until ``steps`` total steps (default: config.steps)."""
        target = self.config.steps if steps is None else steps
        while self.step < target:
            row = self.train_step()
            if self.step % self.config.log_every == 0 or self.step == target:
                logger.info(
                    f"step {row['step']}: loss={row['loss']:.4f} kl_d={row['kl_d']:.4f} "
                    f"kl_l0={row['kl_l0']:.4f} loglik={row['log_likelihood']:.4f}"
                )
            if out_dir is not None and self.step % self.config.checkpoint_every == 0:
                self.save(out_dir)
        if out_dir is not None:
            self.save(out_dir)
        return self.model

    def metadata(self) -> Dict[str, Any]:
        return {
            "config": self.config.to_dict(),
            "scaler": self.scaler.to_dict(),
            "source": describe_source(self.source),
            "seed": self.seed,
            "history": [dict(row) for row in self.history],
        }

    def save(self, out_dir: Union[str, Path]) -> Path:
        out_dir = Path(out_dir)
        path = save_checkpoint(out_dir / CHECKPOINT_NAME, self.model, self.optimizer, self.step, self.metadata())
        self.log_frame().to_csv(out_dir / TRAINING_LOG_NAME, index=False, float_format="%.10g")
        return path

    def log_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.history, columns=LOG_COLUMNS)

    @classmethod
    def resume(cls, path: Union[str, Path], source: Optional[EpisodeSource] = None) -> "Trainer":
        payload = load_checkpoint(path)
        meta = payload["metadata"]
        if source is None:
            source = source_from_description(meta["source"])
        trainer = cls(SanodepConfig.from_dict(meta["config"]), source, seed=meta["seed"])
        load_checkpoint(path, trainer.model, trainer.optimizer)
        trainer.step = int(payload["step"])
        trainer.history = [dict(row) for row in meta.get("history", [])]
        logger.info(f"Resumed training from step {trainer.step}")
        return trainer


def train(config: SanodepConfig, dist: Optional[TaskDistribution] = None, seed: int = 0,
          source: Optional[EpisodeSource] = None, out_dir: Optional[Union[str, Path]] = None) -> SanodepModel:
    """Meta-train a SANODEP model on ``dist`` (or an explicit episode source)."""
    if source is None:
        source = PenicillinSystems(dist=dist) if dist is not None else PenicillinSystems()
    return Trainer(config, source, seed).run(out_dir=out_dir)
