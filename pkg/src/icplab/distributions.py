"""Diagonal Gaussian posteriors: reparameterized sampling and the closed-form
KL divergence to the standard normal prior.

Conventions: the last tensor dimension indexes the Gaussian's dimensions;
any leading dimensions are batch dimensions. KL is summed over the Gaussian
dimensions (reduction over the batch, where wanted, is the caller's job).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .errors import ContractViolationError


@dataclass(frozen=True)
class DiagGaussian:
    """Diagonal-covariance Gaussian, parameterized by mean and log-variance.

    ``mean`` and ``log_var`` must share one shape. A ``DiagGaussian`` whose
    fields are 2-D tensors represents a batch of posteriors (one per row).
    """

    mean: Tensor
    log_var: Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_var.shape:
            raise ContractViolationError(
                f"mean and log_var shapes differ: {tuple(self.mean.shape)} vs "
                f"{tuple(self.log_var.shape)}"
            )

    @property
    def std(self) -> Tensor:
        return torch.exp(0.5 * self.log_var)

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]


def sample_reparam(g: DiagGaussian, noise: Tensor) -> Tensor:
    """Draw from ``g`` by shifting and scaling caller-supplied standard-normal noise.

    Returns ``mean + exp(0.5 * log_var) * noise``; differentiable in ``g``'s
    fields. The noise is injected rather than drawn internally so that every
    draw is replayable from a seed.
    """
    if noise.shape != g.mean.shape:
        raise ContractViolationError(
            f"noise shape {tuple(noise.shape)} does not match mean shape "
            f"{tuple(g.mean.shape)}"
        )
    return g.mean + g.std * noise


def kl_to_standard(g: DiagGaussian) -> Tensor:
    """KL divergence from ``g`` to the standard normal, summed over dimensions.

    Closed form ``0.5 * sum(mean^2 + var - 1 - log_var)``; nonnegative, and
    zero exactly when ``g`` is the standard normal. For a batched ``g`` the
    result has one entry per batch row. Uses expm1 plus a zero clamp so
    rounding can never push the value below 0 near the minimum.
    """
    _require_finite(g)
    per_dim = g.mean.square() + torch.special.expm1(g.log_var) - g.log_var
    return torch.clamp(0.5 * per_dim.sum(dim=-1), min=0.0)


def _require_finite(g: DiagGaussian) -> None:
    if not bool(torch.isfinite(g.mean).all()) or not bool(torch.isfinite(g.log_var).all()):
        raise ContractViolationError("DiagGaussian has non-finite entries")
