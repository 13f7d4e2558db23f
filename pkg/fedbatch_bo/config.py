"""
FedBatchBO Config Module

This module loads the harness configuration: one schema-versioned YAML file
mapped onto a tree of dataclasses whose defaults reproduce the published
settings. Unknown keys are rejected with their dotted path.
"""

import logging
import os
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import yaml

from .campaign import Strategy, StrategySettings
from .dynamics import FixedParams, ProfitCoefficients, SolverSettings
from .errors import ConfigError
from .sanodep import SanodepConfig
from .tasking import DEFAULT_DISTRIBUTIONS, TESTING_DISTRIBUTIONS, EpisodeConfig, TaskDistribution

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
OUTPUT_ENV_VAR = "FEDBATCH_BO_OUT"


@dataclass(frozen=True)
class TrainingSection:
    distribution: str = "on-task-train"
    seed: int = 0
    family: str = "penicillin"


@dataclass(frozen=True)
class BenchmarkSection:
    strategies: Tuple[str, ...] = tuple(s.value for s in Strategy)
    distributions: Tuple[str, ...] = ("on-task",)
    n_tasks: int = 5
    task_seed: int = 7
    failure_threshold: float = 0.1


@dataclass(frozen=True)
class MseSweepSection:
    distributions: Tuple[str, ...] = tuple(
        sorted(TESTING_DISTRIBUTIONS, key=lambda name: DEFAULT_DISTRIBUTIONS[name].offset)
    )
    n_tasks: int = 5
    trajectories_per_task: int = 20
    context_trajectories: int = 3
    context_points: int = 8
    n_samples: int = 32
    task_seed: int = 11


def _default_distributions() -> Dict[str, TaskDistribution]:
    return dict(DEFAULT_DISTRIBUTIONS)


@dataclass(frozen=True)
class HarnessConfig:
    """Everything a CLI run needs; ``sanodep.episodes`` is carried by ``episodes``."""

    schema_version: int = SCHEMA_VERSION
    output_dir: str = "runs"
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    fixed: FixedParams = field(default_factory=FixedParams)
    solver: SolverSettings = field(default_factory=SolverSettings)
    profit: ProfitCoefficients = field(default_factory=ProfitCoefficients)
    episodes: EpisodeConfig = field(default_factory=EpisodeConfig)
    sanodep: SanodepConfig = field(default_factory=SanodepConfig)
    strategies: StrategySettings = field(default_factory=StrategySettings)
    distributions: Dict[str, TaskDistribution] = field(default_factory=_default_distributions)
    training: TrainingSection = field(default_factory=TrainingSection)
    benchmark: BenchmarkSection = field(default_factory=BenchmarkSection)
    mse_sweep: MseSweepSection = field(default_factory=MseSweepSection)

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"Unsupported schema_version {self.schema_version}, expected {SCHEMA_VERSION}")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        names = [self.training.distribution, *self.benchmark.distributions, *self.mse_sweep.distributions]
        for name in names:
            if name not in self.distributions:
                raise ConfigError(f"Unknown distribution '{name}'")
        valid = {s.value for s in Strategy}
        for name in self.benchmark.strategies:
            if name not in valid:
                raise ConfigError(f"Unknown strategy '{name}' in benchmark.strategies")
        if self.training.family not in ("penicillin", "exponential-decay"):
            raise ConfigError(f"Unknown training family '{self.training.family}'")

    def sanodep_config(self) -> SanodepConfig:
        return replace(self.sanodep, episodes=self.episodes)

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> "HarnessConfig":
        return _build(cls, data or {}, "")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "HarnessConfig":
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = yaml.safe_load(f)
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"Cannot read config {path}: {e}") from e
        config = cls.from_dict(data)
        logger.info(f"Loaded config from {path}")
        return config

    def to_dict(self) -> Dict[str, Any]:
        data = _plain(self)
        data["sanodep"].pop("episodes", None)
        data["distributions"] = {
            name: {"offset": d.offset, "window": d.window} for name, d in self.distributions.items()
        }
        return data

    def dump(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            yaml.safe_dump(self.to_dict(), f, sort_keys=False)
        return path

    def resolve_output_dir(self, cli_out: Optional[str] = None) -> Path:
        """--out beats $FEDBATCH_BO_OUT, which beats the file."""
        return Path(cli_out or os.getenv(OUTPUT_ENV_VAR) or self.output_dir)


def _plain(obj: Any) -> Any:
    if is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(value: Any, ftype: Any, where: str) -> Any:
    if ftype is float and isinstance(value, (int, str)) and not isinstance(value, bool):
        try:
            return float(value)
        except ValueError as e:
            raise ConfigError(f"'{where}' must be a number, got {value!r}") from e
    if isinstance(value, list):
        return tuple(value)
    return value


def _build(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"'{where or 'config'}' must be a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    if cls is SanodepConfig:
        known.pop("episodes")
    for key in data:
        if key not in known:
            raise ConfigError(f"Unknown key '{where + '.' if where else ''}{key}'")
    kwargs = {}
    for key, value in data.items():
        path = f"{where}.{key}" if where else key
        ftype = known[key].type
        if cls is HarnessConfig and key == "distributions":
            kwargs[key] = _build_distributions(value, path)
        elif is_dataclass(ftype):
            kwargs[key] = _build(ftype, value if value is not None else {}, path)
        else:
            kwargs[key] = _coerce(value, ftype, path)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid '{where or 'config'}': {e}") from e


def _build_distributions(data: Any, where: str) -> Dict[str, TaskDistribution]:
    if not isinstance(data, dict):
        raise ConfigError(f"'{where}' must be a mapping of name -> {{offset, window}}")
    table = {}
    for name, entry in data.items():
        if not isinstance(entry, dict):
            raise ConfigError(f"'{where}.{name}' must be a mapping")
        unknown = set(entry) - {"offset", "window"}
        if unknown:
            raise ConfigError(f"Unknown key '{where}.{name}.{sorted(unknown)[0]}'")
        try:
            table[name] = TaskDistribution(name=name, **{k: float(v) for k, v in entry.items()})
        except ValueError as e:
            raise ConfigError(f"Invalid '{where}.{name}': {e}") from e
    return table
