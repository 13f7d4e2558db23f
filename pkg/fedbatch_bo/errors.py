"""
FedBatchBO Errors Module

Domain exceptions raised by the library. Library code raises; the CLI and the
benchmark matrix catch, log and map them to exit codes.
"""

from typing import Any, Optional


class FedBatchError(Exception):
    """Base class for every error raised by fedbatch_bo."""


class InvalidParameters(FedBatchError, ValueError):
    """A task, recipe, state or settings object violates its invariants."""


class DivergedTrajectory(FedBatchError):
    """A simulated state exceeded the divergence cap.

    Attributes:
        partial: the valid prefix of the trajectory (a ``Trajectory``), or None
            when nothing past the initial condition was integrated.
        time: simulation time at which the cap was exceeded.
    """

    def __init__(self, message: str, partial: Optional[Any] = None, time: float = float("nan")):
        super().__init__(message)
        self.partial = partial
        self.time = time


class InvalidDistribution(FedBatchError, ValueError):
    """A task distribution would produce non-positive kinetic parameters."""


class FitFailed(FedBatchError):
    """The GP kernel matrix stayed non positive-definite after the jitter ladder."""


class NonFiniteGradient(FedBatchError):
    """A loss or one of its gradients was NaN or infinite."""


class NonFiniteLatent(FedBatchError):
    """The latent ODE produced a NaN or infinite state."""


class InfeasibleSearch(FedBatchError):
    """No candidate satisfied the acquisition constraints."""


class TrainingAborted(FedBatchError):
    """Meta-training stopped, e.g. too many diverged episodes in one step."""


class CampaignFailed(FedBatchError):
    """A Bayesian optimisation campaign could not be completed."""


class ConfigError(FedBatchError, ValueError):
    """The harness configuration file is malformed or has unknown keys."""
