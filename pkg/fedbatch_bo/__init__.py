"""
FedBatchBO Package

This package contains few-shot Bayesian optimisation of a simulated fed-batch
penicillin reactor: the process model, task distributions, a GP surrogate,
the SANODEP neural-process model, acquisition search, campaign loops and the
benchmark CLI.
"""

from .acquisition import expected_improvement, mc_acquisition, optimize_acquisition
from .campaign import CampaignResult, Strategy, StrategySettings, TaskMaxCache, run_strategy
from .config import HarnessConfig
from .dynamics import Recipe, Task, Trajectory, profit, simulate
from .errors import FedBatchError
from .gp_surrogate import GpHyperparams, GpModel, condition, fit, posterior
from .sanodep import SanodepConfig, SanodepModel, Trainer, train
from .tasking import EpisodeConfig, TaskDistribution, generate_episode

__version__ = "1.0.0"
__author__ = "FedBatchBO Team"

__all__ = [
    "simulate",
    "profit",
    "Recipe",
    "Task",
    "Trajectory",
    "TaskDistribution",
    "EpisodeConfig",
    "generate_episode",
    "GpHyperparams",
    "GpModel",
    "condition",
    "posterior",
    "fit",
    "SanodepConfig",
    "SanodepModel",
    "Trainer",
    "train",
    "expected_improvement",
    "mc_acquisition",
    "optimize_acquisition",
    "Strategy",
    "StrategySettings",
    "CampaignResult",
    "TaskMaxCache",
    "run_strategy",
    "HarnessConfig",
    "FedBatchError",
]
