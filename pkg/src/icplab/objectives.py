"""Loss terms for the competing-representations objective and its ablations.

Every term is minimization-oriented and follows one reduction convention:
sum over feature/pixel dimensions, mean over the batch. This keeps the
weights (alpha, beta, gamma) invariant to batch size.

The full objective trains a representation r = [z, y] where a joint head,
a z-head, and a y-head each solve the downstream task, z is pulled toward
a standard-normal prior (capacity constraint), y is pushed to stay
informative about the input via a discriminator-based Jensen-Shannon
surrogate, and a predictor-defeating term keeps z and y independent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .distributions import DiagGaussian, kl_to_standard
from .errors import ContractViolationError, DivergenceError

Scalar = Union[float, Tensor]

VARIANTS = ("ICP", "ICP_ALL", "ICP_COM", "VIB", "DIM_STAR", "VIB_X2", "DIM_STAR_X2")

# Which breakdown terms each variant trains on. Weights: the three inference
# terms enter with unit weight, mi_min with beta, mi_max with alpha,
# independence with gamma.
ACTIVE_TERMS = {
    "ICP": ("synergy", "mi_max", "mi_min", "infer_z", "infer_y", "independence"),
    "ICP_ALL": ("synergy",),
    "ICP_COM": ("synergy", "mi_max", "mi_min"),
    "VIB": ("infer_z", "mi_min"),
    "VIB_X2": ("infer_z", "mi_min"),
    "DIM_STAR": ("infer_y", "mi_max"),
    "DIM_STAR_X2": ("infer_y", "mi_max"),
}

# Probabilities are clamped to [EPS, 1-EPS] inside log terms; the JS
# surrogate diverges at discriminator outputs of exactly 0 or 1.
PROB_EPS = 1e-7

# Cap on the per-dimension squared error the encoder is rewarded for
# inflicting on the predictor; without it the min-max game is unbounded
# (the encoder could grow representation magnitude forever).
PRED_ERROR_CLIP = 10.0


@dataclass(frozen=True)
class ICPHyperparams:
    """Regularization weights and the loss-variant selector.

    alpha weighs the input-information maximization on y, beta the
    capacity constraint on z, gamma the z/y independence pressure.
    """

    alpha: float = 0.1
    beta: float = 0.1
    gamma: float = 0.1
    variant: str = "ICP"

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v >= 0):
                raise ContractViolationError(f"{name} must be finite and >= 0, got {v!r}")
        if self.variant not in VARIANTS:
            raise ContractViolationError(
                f"unknown variant {self.variant!r}; expected one of {VARIANTS}"
            )

    @property
    def active_terms(self) -> tuple:
        return ACTIVE_TERMS[self.variant]


@dataclass(frozen=True)
class TermBreakdown:
    """Per-term values of the assembled objective, all minimization losses.

    Unweighted terms; ``total`` is the variant-specific weighted sum
    (unit weights on the inference terms, beta on mi_min, alpha on mi_max,
    gamma on independence). Terms inactive for the chosen variant are 0.
    """

    synergy: Scalar = 0.0
    mi_max: Scalar = 0.0
    mi_min: Scalar = 0.0
    infer_z: Scalar = 0.0
    infer_y: Scalar = 0.0
    independence: Scalar = 0.0
    total: Scalar = 0.0

    def as_floats(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = float(v.detach()) if isinstance(v, Tensor) else float(v)
        return out


def mi_min_upper_bound(posteriors: DiagGaussian) -> Tensor:
    """Batch mean of the KL to the standard normal.

    Tractable surrogate that upper-bounds the information the z-branch
    keeps about the input; enters the loss with weight +beta.
    """
    if posteriors.mean.ndim != 2:
        raise ContractViolationError(
            f"expected a batch of posteriors (2-D fields), got ndim={posteriors.mean.ndim}"
        )
    if posteriors.mean.shape[0] == 0:
        raise ContractViolationError("empty posterior batch")
    return kl_to_standard(posteriors).mean()


def shuffle_pairs(y: Tensor, permutation: Sequence[int]) -> Tensor:
    """Reindex the rows of ``y`` by a derangement, producing negative pairs.

    Row i of the output is the y of a different sample, so pairing it with
    the original inputs draws from the product of marginals.
    """
    n = y.shape[0]
    if n < 2:
        raise ContractViolationError("batch size must be >= 2 (no derangement exists)")
    perm = torch.as_tensor(permutation, dtype=torch.long, device=y.device)
    if perm.shape != (n,):
        raise ContractViolationError(
            f"permutation length {tuple(perm.shape)} does not match batch size {n}"
        )
    arange = torch.arange(n, device=y.device)
    if not torch.equal(torch.sort(perm).values, arange):
        raise ContractViolationError("permutation is not a bijection on batch indices")
    if bool((perm == arange).any()):
        raise ContractViolationError("permutation has a fixed point (not a derangement)")
    return y[perm]


def random_derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random derangement of ``range(n)`` by rejection sampling."""
    if n < 2:
        raise ContractViolationError("no derangement exists for n < 2")
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def js_mi_estimate(d_pos: Tensor, d_neg: Tensor) -> Tensor:
    """Discriminator-based Jensen-Shannon surrogate for the y/input dependence.

    ``mean(log d_pos) + mean(log(1 - d_neg))`` with probabilities clamped to
    [1e-7, 1 - 1e-7]. Always <= 0 with supremum 0; equals -2 ln 2 when the
    discriminator outputs 0.5 everywhere. The discriminator maximizes this
    value in its own phase, and the encoder maximizes it (weight alpha) in
    the main phase.
    """
    if d_pos.numel() == 0 or d_neg.numel() == 0:
        raise ContractViolationError("empty probability batch")
    d_pos = torch.clamp(d_pos, PROB_EPS, 1.0 - PROB_EPS)
    d_neg = torch.clamp(d_neg, PROB_EPS, 1.0 - PROB_EPS)
    return torch.log(d_pos).mean() + torch.log1p(-d_neg).mean()


def supervised_inference_loss(logits: Tensor, labels: Tensor) -> Tensor:
    """Mean cross entropy; the task-information lower bound for classifier heads."""
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ContractViolationError(
            f"logits must be (batch, C) with C >= 2, got shape {tuple(logits.shape)}"
        )
    if labels.numel() == 0:
        raise ContractViolationError("empty label batch")
    labels = labels.long()
    if bool((labels < 0).any()) or bool((labels >= logits.shape[1]).any()):
        raise ContractViolationError(
            f"label out of range [0, {logits.shape[1]}): {labels.min()}..{labels.max()}"
        )
    return F.cross_entropy(logits, labels)


def reconstruction_loss(x_hat: Tensor, x: Tensor) -> Tensor:
    """Squared pixel error, summed per sample and averaged over the batch."""
    if x_hat.shape != x.shape:
        raise ContractViolationError(
            f"shape mismatch: {tuple(x_hat.shape)} vs {tuple(x.shape)}"
        )
    return (x_hat - x).square().flatten(start_dim=1).sum(dim=-1).mean()


def predictability_loss(
    prediction: Tensor, target: Tensor, clip: Optional[float] = None
) -> Tensor:
    """Squared error of a cross-predictor, summed per sample, batch-averaged.

    The target is treated as a constant (no gradient flows into it). The
    predictor minimizes the raw error; when the encoder is instead rewarded
    for this error, pass ``clip`` (per-dimension cap) so the reward saturates.
    """
    if prediction.shape != target.shape:
        raise ContractViolationError(
            f"shape mismatch: {tuple(prediction.shape)} vs {tuple(target.shape)}"
        )
    sq = (prediction - target.detach()).square()
    if clip is not None:
        sq = torch.clamp(sq, max=clip)
    return sq.flatten(start_dim=1).sum(dim=-1).mean()


def assemble_loss(
    hp: ICPHyperparams,
    *,
    infer_r: Optional[Scalar] = None,
    infer_z: Optional[Scalar] = None,
    infer_y: Optional[Scalar] = None,
    mi_min: Optional[Scalar] = None,
    js: Optional[Scalar] = None,
    pred_err: Optional[Scalar] = None,
) -> TermBreakdown:
    """Combine raw term values into the variant's weighted total.

    Inputs are the natural estimator outputs: inference losses and the KL
    bound are nonnegative, ``js`` is the (nonpositive) JS estimate, and
    ``pred_err`` is the (nonnegative) predictor error. Stored

      synergy = infer_r, mi_max = -js, independence = -pred_err,

    so that every breakdown field is a minimization loss and

      total = synergy + infer_z + infer_y
              + beta * mi_min + alpha * mi_max + gamma * independence

    restricted to the variant's active terms. Terms not active for the
    variant are recorded as 0 regardless of what was passed.
    """
    provided = {
        "synergy": infer_r,
        "infer_z": infer_z,
        "infer_y": infer_y,
        "mi_min": mi_min,
        "mi_max": None if js is None else -js,
        "independence": None if pred_err is None else -pred_err,
    }
    active = hp.active_terms
    terms = {}
    for name, value in provided.items():
        if name not in active:
            terms[name] = 0.0
            continue
        if value is None:
            raise ContractViolationError(
                f"variant {hp.variant} requires term {name!r} but it was not provided"
            )
        scalar = float(value.detach()) if isinstance(value, Tensor) else float(value)
        if math.isnan(scalar):
            raise DivergenceError(
                f"NaN in active term {name!r}",
                breakdown=TermBreakdown(**provided_as_breakdown(provided)),
            )
        terms[name] = value

    weights = {
        "synergy": 1.0,
        "infer_z": 1.0,
        "infer_y": 1.0,
        "mi_min": hp.beta,
        "mi_max": hp.alpha,
        "independence": hp.gamma,
    }
    total: Scalar = 0.0
    for name in active:
        total = total + weights[name] * terms[name]
    return TermBreakdown(total=total, **terms)


def provided_as_breakdown(provided: dict) -> dict:
    """Fill missing diagnostic values with 0 so a breakdown can be attached to errors."""
    return {k: (0.0 if v is None else v) for k, v in provided.items()}
