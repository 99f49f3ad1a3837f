"""Miniature architectures: shared conv trunk with a stochastic z-head and a
deterministic y-head, per-part task solvers, a pair discriminator, and the
cross-predictors. Sized to train in minutes on CPU.

Hidden activations are tanh throughout: smooth everywhere, so analytic
gradients agree with central finite differences to tight tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import torch
import torch.nn as nn
from torch import Tensor

from .distributions import DiagGaussian, sample_reparam
from .errors import ConfigurationError, ContractViolationError

SUPERVISED = "supervised"
SELF_SUPERVISED = "self_supervised"


@dataclass(frozen=True)
class ArchSpec:
    """Shape-level description of a model bundle."""

    input_shape: Tuple[int, int, int]  # (channels, height, width)
    d_z: int
    d_y: int
    mode: str = SUPERVISED
    num_classes: Optional[int] = None
    trunk_widths: Tuple[int, ...] = (32, 64, 64)

    def __post_init__(self):
        if len(self.input_shape) != 3 or any(s < 1 for s in self.input_shape):
            raise ConfigurationError(f"input_shape must be (C, H, W) positive, got {self.input_shape}")
        if self.d_z < 1:
            raise ConfigurationError(f"d_z must be >= 1, got {self.d_z}")
        if self.d_y < 1:
            raise ConfigurationError(f"d_y must be >= 1, got {self.d_y}")
        if self.mode not in (SUPERVISED, SELF_SUPERVISED):
            raise ConfigurationError(f"mode must be supervised|self_supervised, got {self.mode!r}")
        if self.mode == SUPERVISED:
            if self.num_classes is None or self.num_classes < 2:
                raise ConfigurationError(
                    f"num_classes must be >= 2 in supervised mode, got {self.num_classes}"
                )
        elif self.num_classes is not None:
            raise ConfigurationError("num_classes must be absent in self_supervised mode")
        if not self.trunk_widths or any(w < 1 for w in self.trunk_widths):
            raise ConfigurationError(f"trunk_widths must be positive, got {self.trunk_widths}")
        _, h, w = self.input_shape
        f = 2 ** len(self.trunk_widths)
        if h % f or w % f:
            raise ConfigurationError(
                f"input_shape {self.input_shape}: height/width must be divisible by "
                f"2^len(trunk_widths) = {f}"
            )

    @property
    def d_r(self) -> int:
        return self.d_z + self.d_y

    @property
    def feature_dim(self) -> int:
        _, h, w = self.input_shape
        f = 2 ** len(self.trunk_widths)
        return self.trunk_widths[-1] * (h // f) * (w // f)


def _mlp(d_in: int, hidden: int, d_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_in, hidden), nn.Tanh(), nn.Linear(hidden, d_out))


class _ConvTrunk(nn.Module):
    def __init__(self, spec: ArchSpec):
        super().__init__()
        layers = []
        c_in = spec.input_shape[0]
        for w in spec.trunk_widths:
            layers += [nn.Conv2d(c_in, w, kernel_size=4, stride=2, padding=1), nn.Tanh()]
            c_in = w
        layers.append(nn.Flatten())
        self.net = nn.Sequential(*layers)

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)


class _Decoder(nn.Module):
    """Mirror of the trunk: affine seed into a low-res map, then transposed convs."""

    def __init__(self, spec: ArchSpec, d_in: int):
        super().__init__()
        c, h, w = spec.input_shape
        widths = spec.trunk_widths
        f = 2 ** len(widths)
        self.seed_shape = (widths[-1], h // f, w // f)
        self.fc = nn.Linear(d_in, widths[-1] * (h // f) * (w // f))
        layers = []
        rev = list(reversed(widths))
        for w_in, w_out in zip(rev, rev[1:]):
            layers += [nn.ConvTranspose2d(w_in, w_out, kernel_size=4, stride=2, padding=1), nn.Tanh()]
        layers += [nn.ConvTranspose2d(rev[-1], c, kernel_size=4, stride=2, padding=1), nn.Sigmoid()]
        self.net = nn.Sequential(*layers)

    def forward(self, rep: Tensor) -> Tensor:
        h = torch.tanh(self.fc(rep))
        return self.net(h.view(-1, *self.seed_shape))


class ModelBundle(nn.Module):
    """All trainable parts, grouped for the alternating optimization.

    The three optimizer groups (encoder+solvers, discriminator, predictors)
    own disjoint parameter sets; the phases of the training loop rely on that.
    """

    def __init__(self, spec: ArchSpec):
        super().__init__()
        self.spec = spec
        self.trunk = _ConvTrunk(spec)
        self.z_head = nn.Linear(spec.feature_dim, 2 * spec.d_z)
        self.y_head = nn.Linear(spec.feature_dim, spec.d_y)
        if spec.mode == SUPERVISED:
            self.solver_z = nn.Linear(spec.d_z, spec.num_classes)
            self.solver_y = nn.Linear(spec.d_y, spec.num_classes)
            self.solver_r = nn.Linear(spec.d_r, spec.num_classes)
        else:
            self.solver_z = _Decoder(spec, spec.d_z)
            self.solver_y = _Decoder(spec, spec.d_y)
            self.solver_r = _Decoder(spec, spec.d_r)
        self.discriminator = _mlp(spec.feature_dim + spec.d_y, 256, 1)
        self.predictor_zy = _mlp(spec.d_z, 128, spec.d_y)
        self.predictor_yz = _mlp(spec.d_y, 128, spec.d_z)

    def features(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or tuple(x.shape[1:]) != self.spec.input_shape:
            raise ContractViolationError(
                f"input batch shape {tuple(x.shape)} does not match (N, *{self.spec.input_shape})"
            )
        return self.trunk(x)

    def posterior(self, feat: Tensor) -> DiagGaussian:
        stats = self.z_head(feat)
        mean, log_var = stats.chunk(2, dim=-1)
        return DiagGaussian(mean, log_var)

    def main_parameters(self):
        for m in (self.trunk, self.z_head, self.y_head, self.solver_z, self.solver_y, self.solver_r):
            yield from m.parameters()

    def discriminator_parameters(self):
        return self.discriminator.parameters()

    def predictor_parameters(self):
        for m in (self.predictor_zy, self.predictor_yz):
            yield from m.parameters()


def build(spec: ArchSpec, seed: int) -> ModelBundle:
    """Deterministically initialized bundle for ``spec``.

    Same (spec, seed) yields bit-identical parameters. The discriminator's
    output layer starts near zero so fresh bundles score pairs near 0.5.
    """
    torch.manual_seed(seed)
    bundle = ModelBundle(spec)
    final = bundle.discriminator[-1]
    with torch.no_grad():
        final.weight.normal_(0.0, 1e-2)
        final.bias.zero_()
    return bundle


def encode(bundle: ModelBundle, x: Tensor, noise: Tensor) -> Tuple[Tensor, DiagGaussian, Tensor]:
    """Split representation: stochastic z (reparameterized) and deterministic y.

    Both heads read the same trunk features. ``noise`` must be a standard
    normal draw of shape (batch, d_z), supplied by the caller.
    """
    feat = bundle.features(x)
    post = bundle.posterior(feat)
    z = sample_reparam(post, noise)
    y = bundle.y_head(feat)
    return z, post, y


def discriminate(bundle: ModelBundle, x_feat: Tensor, y: Tensor) -> Tensor:
    """Probability in (0,1) that (features, y) is a true pair; one value per row."""
    if x_feat.shape[0] != y.shape[0]:
        raise ContractViolationError(
            f"batch sizes differ: features {x_feat.shape[0]} vs y {y.shape[0]}"
        )
    if x_feat.shape[-1] != bundle.spec.feature_dim or y.shape[-1] != bundle.spec.d_y:
        raise ContractViolationError(
            f"discriminator inputs ({x_feat.shape[-1]}, {y.shape[-1]}) do not match "
            f"(feature_dim={bundle.spec.feature_dim}, d_y={bundle.spec.d_y})"
        )
    logit = bundle.discriminator(torch.cat([x_feat, y], dim=-1))
    return torch.sigmoid(logit).squeeze(-1)


def predict_cross(bundle: ModelBundle, source: Tensor, direction: str) -> Tensor:
    """Map one representation part onto the other (z_to_y or y_to_z)."""
    if direction == "z_to_y":
        head, d_in = bundle.predictor_zy, bundle.spec.d_z
    elif direction == "y_to_z":
        head, d_in = bundle.predictor_yz, bundle.spec.d_y
    else:
        raise ContractViolationError(f"direction must be z_to_y|y_to_z, got {direction!r}")
    if source.shape[-1] != d_in:
        raise ContractViolationError(
            f"source dimension {source.shape[-1]} does not match {direction} input {d_in}"
        )
    return head(source)


def solve(bundle: ModelBundle, which: str, representation: Tensor) -> Tensor:
    """Run the task head for one part: logits (supervised) or an image in [0,1]."""
    dims = {"z": bundle.spec.d_z, "y": bundle.spec.d_y, "r": bundle.spec.d_r}
    if which not in dims:
        raise ContractViolationError(f"head must be one of z|y|r, got {which!r}")
    if representation.shape[-1] != dims[which]:
        raise ContractViolationError(
            f"representation dimension {representation.shape[-1]} does not match "
            f"{which}-head input {dims[which]}"
        )
    head = {"z": bundle.solver_z, "y": bundle.solver_y, "r": bundle.solver_r}[which]
    return head(representation)
