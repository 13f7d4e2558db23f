"""
FedBatchBO Neural Core Module

This module holds the differentiable building blocks of the SANODEP
surrogate on top of torch: dense networks, diagonal Gaussians with the
reparameterisation trick and closed-form KL, reverse-mode gradients with
finiteness checks, Adam steps with gradient-norm clipping, and a
self-describing checkpoint container.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import torch
from torch import nn
from torch.nn.utils import clip_grad_norm_, parameters_to_vector, vector_to_parameters

from .errors import InvalidParameters, NonFiniteGradient

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = torch.float64
CHECKPOINT_SCHEMA_VERSION = 1
DEFAULT_CLIP_NORM = 10.0

_ACTIVATIONS = {"tanh": nn.Tanh, "softplus": nn.Softplus}


class MLP(nn.Module):
    """Affine layers with a smooth nonlinearity between them; the last layer is linear."""

    def __init__(self, in_dim: int, widths: Sequence[int], out_dim: int, activation: str = "tanh",
                 dtype: torch.dtype = DEFAULT_DTYPE, generator: Optional[torch.Generator] = None):
        super().__init__()
        if in_dim < 1 or out_dim < 1 or any(w < 1 for w in widths):
            raise InvalidParameters(f"Layer sizes must be positive: {in_dim}, {list(widths)}, {out_dim}")
        if activation not in _ACTIVATIONS:
            raise InvalidParameters(f"Unknown activation '{activation}'")
        sizes = [in_dim, *widths, out_dim]
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.layers = nn.ModuleList(
            nn.Linear(a, b, dtype=dtype) for a, b in zip(sizes[:-1], sizes[1:])
        )
        self.activation = _ACTIVATIONS[activation]()
        self.reset_parameters(generator)

    def reset_parameters(self, generator: Optional[torch.Generator] = None) -> None:
        """Scaled-uniform fan-in weights, zero biases."""
        with torch.no_grad():
            for layer in self.layers:
                bound = 1.0 / layer.in_features ** 0.5
                layer.weight.uniform_(-bound, bound, generator=generator)
                layer.bias.zero_()

    def zero_output(self) -> None:
        with torch.no_grad():
            self.layers[-1].weight.zero_()
            self.layers[-1].bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_dim:
            raise InvalidParameters(f"MLP expects {self.in_dim} input features, got {x.shape[-1]}")
        for layer in self.layers[:-1]:
            x = self.activation(layer(x))
        return self.layers[-1](x)


def mlp_forward(mlp: MLP, x: torch.Tensor) -> torch.Tensor:
    return mlp(x)


@dataclass
class DiagGaussian:
    """Gaussian with diagonal covariance, parameterised by mean and log-variance."""

    mean: torch.Tensor
    logvar: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.logvar.shape:
            raise InvalidParameters(f"mean {tuple(self.mean.shape)} and logvar {tuple(self.logvar.shape)} differ")

    @property
    def variance(self) -> torch.Tensor:
        return torch.exp(self.logvar)

    @property
    def std(self) -> torch.Tensor:
        return torch.exp(0.5 * self.logvar)

    def log_prob(self, x: torch.Tensor) -> torch.Tensor:
        """Log-density summed over the last axis."""
        return -0.5 * torch.sum(
            self.logvar + (x - self.mean) ** 2 / self.variance + torch.log(torch.tensor(2 * torch.pi, dtype=x.dtype)),
            dim=-1,
        )

    def detach(self) -> "DiagGaussian":
        return DiagGaussian(self.mean.detach(), self.logvar.detach())


def standard_normal(shape: Sequence[int], dtype: torch.dtype = DEFAULT_DTYPE) -> DiagGaussian:
    return DiagGaussian(torch.zeros(*shape, dtype=dtype), torch.zeros(*shape, dtype=dtype))


def sample_reparam(q: DiagGaussian, noise: torch.Tensor) -> torch.Tensor:
    """mean + exp(logvar / 2) * noise"""
    if noise.shape[-1:] != q.mean.shape[-1:]:
        raise InvalidParameters(f"Noise shape {tuple(noise.shape)} does not match {tuple(q.mean.shape)}")
    return q.mean + torch.exp(0.5 * q.logvar) * noise


def kl_diag(q: DiagGaussian, p: DiagGaussian) -> torch.Tensor:
    """KL(q || p) summed over the last axis."""
    if q.mean.shape[-1] != p.mean.shape[-1]:
        raise InvalidParameters("KL between Gaussians of different dimension")
    ratio = torch.exp(q.logvar - p.logvar)
    return 0.5 * torch.sum(
        ratio + (p.mean - q.mean) ** 2 / torch.exp(p.logvar) - 1.0 + p.logvar - q.logvar,
        dim=-1,
    )


def grad(loss_fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor]) -> Tuple[torch.Tensor, List[torch.Tensor]]:
    """Reverse-mode gradient of a scalar loss with respect to ``params``.

    Returns:
        (loss, gradients); unused parameters get zero gradients

    Raises:
        NonFiniteGradient: if the loss or any gradient entry is NaN or infinite
    """
    params = list(params)
    loss = loss_fn()
    if not torch.isfinite(loss).all():
        raise NonFiniteGradient(f"Non-finite loss {loss.item() if loss.numel() == 1 else loss}")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    for g in grads:
        if not torch.isfinite(g).all():
            raise NonFiniteGradient("Non-finite gradient entry")
    return loss.detach(), grads


def make_optimizer(params: Sequence[torch.Tensor], lr: float = 1e-3,
                   betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> torch.optim.Adam:
    if lr <= 0:
        raise InvalidParameters(f"Learning rate must be positive, got {lr}")
    return torch.optim.Adam(list(params), lr=lr, betas=betas, eps=eps)


def opt_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], optimizer: torch.optim.Optimizer,
             clip_norm: Optional[float] = DEFAULT_CLIP_NORM) -> float:
    """Apply one Adam update in place; the optimizer carries the moment state.

    Returns:
        the gradient norm before clipping
    """
    params = list(params)
    if len(params) != len(grads):
        raise InvalidParameters(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise InvalidParameters(f"Gradient shape {tuple(g.shape)} does not match {tuple(p.shape)}")
        p.grad = g.detach().clone()
    if clip_norm:
        norm = float(clip_grad_norm_(params, clip_norm))
    else:
        norm = float(torch.sqrt(sum(torch.sum(p.grad ** 2) for p in params)))
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)
    return norm


def shape_registry(module: nn.Module) -> Dict[str, List[int]]:
    return {name: list(p.shape) for name, p in module.named_parameters()}


def flat_parameters(module: nn.Module) -> torch.Tensor:
    return parameters_to_vector(module.parameters()).detach().clone()


def save_checkpoint(path: Union[str, Path], module: nn.Module, optimizer: Optional[torch.optim.Optimizer] = None,
                    step: int = 0, metadata: Optional[Dict[str, Any]] = None) -> Path:
    """Write schema version, shape registry, flat parameters, step and metadata."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "shapes": shape_registry(module),
        "params": flat_parameters(module),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "step": int(step),
        "metadata": metadata or {},
    }
    torch.save(payload, path)
    logger.info(f"Saved checkpoint at step {step} to {path}")
    return path


def load_checkpoint(path: Union[str, Path], module: Optional[nn.Module] = None,
                    optimizer: Optional[torch.optim.Optimizer] = None) -> Dict[str, Any]:
    """Read a checkpoint; optionally restore it into ``module`` and ``optimizer``."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    if payload.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise InvalidParameters(f"Unsupported checkpoint schema {payload.get('schema_version')}")
    if module is not None:
        expected = shape_registry(module)
        if expected != payload["shapes"]:
            raise InvalidParameters(f"Checkpoint shapes do not match the model: {payload['shapes']}")
        with torch.no_grad():
            vector_to_parameters(payload["params"].to(next(module.parameters()).dtype), module.parameters())
    if optimizer is not None and payload.get("optimizer") is not None:
        optimizer.load_state_dict(payload["optimizer"])
    return payload
