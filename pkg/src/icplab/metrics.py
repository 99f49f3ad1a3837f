"""Quantitative evaluation (information-gap disentanglement score, error rates,
reconstruction fidelity) and qualitative artifacts (classifier-weight heatmaps,
latent traversals)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from skimage.metrics import structural_similarity

from .datasets import FactorDataset
from .errors import ConfigurationError, ContractViolationError
from .networks import SELF_SUPERVISED, ModelBundle, solve
from .objectives import predictability_loss

DEFAULT_BINS = 20
DEFAULT_MIG_SAMPLES = 10_000


def discrete_mutual_information(a: Sequence[int], b: Sequence[int]) -> float:
    """Plug-in mutual information (nats) of the empirical joint of two codes."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ContractViolationError(f"code sequences must be equal-length 1-D, got {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ContractViolationError("empty code sequences")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    joint = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.float64)
    np.add.at(joint, (ai, bi), 1.0)
    joint /= a.size
    pa = joint.sum(axis=1, keepdims=True)
    pb = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    return float(np.sum(joint[nz] * np.log(joint[nz] / (pa @ pb)[nz])))


def discrete_entropy(codes: Sequence[int]) -> float:
    codes = np.asarray(codes)
    _, counts = np.unique(codes, return_counts=True)
    p = counts / codes.size
    return float(-np.sum(p * np.log(p)))


def quantile_bin(x: np.ndarray, bins: int) -> np.ndarray:
    """Equal-occupancy discretization of one latent dimension.

    Bin edges are order statistics (inverted-CDF quantiles), so codes are
    invariant under any strictly monotone transform of x, and a constant
    dimension collapses to a single code.
    """
    if bins < 2:
        raise ConfigurationError(f"bins must be >= 2, got {bins}")
    edges = np.quantile(x, np.linspace(0, 1, bins + 1)[1:-1], method="inverted_cdf")
    return np.searchsorted(edges, x, side="left")


@dataclass
class MIGReport:
    """Normalized information gap per factor, averaged into one score."""

    score: float
    per_factor: List[Tuple[str, int, float, float]]  # (name, best latent, gap, entropy)
    bins: int
    n_samples: int
    skipped: Tuple[str, ...] = field(default=())

    def to_dict(self) -> dict:
        return {
            "score": self.score,
            "per_factor": [
                {"factor": n, "best_latent": i, "gap": g, "entropy": h}
                for n, i, g, h in self.per_factor
            ],
            "bins": self.bins,
            "n_samples": self.n_samples,
            "skipped": list(self.skipped),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def mig_score(
    latents: np.ndarray,
    factor_values: np.ndarray,
    factor_names: Optional[Sequence[str]] = None,
    factor_mask: Optional[Sequence[bool]] = None,
    bins: int = DEFAULT_BINS,
) -> MIGReport:
    """Information gap between the two latents most informative of each factor.

    Each latent dimension is quantile-binned; for every unmasked factor the
    gap (top MI minus runner-up MI across latents) is normalized by the
    factor's entropy, and the score averages the normalized gaps. Nuisance
    factors are excluded via ``factor_mask`` (True = evaluate). Factors with
    zero empirical entropy cannot be scored and are reported as skipped.
    """
    latents = np.asarray(latents, dtype=np.float64)
    factor_values = np.asarray(factor_values)
    if latents.ndim != 2 or factor_values.ndim != 2 or latents.shape[0] != factor_values.shape[0]:
        raise ContractViolationError(
            f"latents {latents.shape} / factor_values {factor_values.shape} mismatch"
        )
    n, d = latents.shape
    k = factor_values.shape[1]
    if bins < 2:
        raise ConfigurationError(f"bins must be >= 2, got {bins}")
    if n < bins:
        raise ContractViolationError(f"need at least bins={bins} samples, got {n}")
    if factor_names is None:
        factor_names = [f"factor_{j}" for j in range(k)]
    if factor_mask is None:
        factor_mask = [True] * k

    codes = np.stack([quantile_bin(latents[:, j], bins) for j in range(d)], axis=1)
    per_factor = []
    skipped = []
    for j in range(k):
        if not factor_mask[j]:
            continue
        h = discrete_entropy(factor_values[:, j])
        if h == 0.0:
            skipped.append(factor_names[j])
            continue
        mi = np.array([discrete_mutual_information(codes[:, i], factor_values[:, j]) for i in range(d)])
        order = np.argsort(mi)[::-1]
        best = int(order[0])
        second = float(mi[order[1]]) if d > 1 else 0.0
        gap = float(mi[best]) - second
        per_factor.append((factor_names[j], best, gap, h))
    if not per_factor:
        raise ContractViolationError("no evaluable factors (all masked or zero-entropy)")
    score = float(np.mean([g / h for _, _, g, h in per_factor]))
    return MIGReport(score, per_factor, bins, n, tuple(skipped))


def classification_error(logits, labels) -> float:
    """Percent of samples whose argmax prediction (lowest-index ties) is wrong."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ContractViolationError(f"logits {logits.shape} / labels {labels.shape} mismatch")
    if logits.shape[0] == 0:
        raise ContractViolationError("empty batch")
    pred = np.argmax(logits, axis=1)
    return 100.0 * float(np.mean(pred != labels))


def mse(x_hat, x) -> float:
    """Mean squared error over all pixels and samples."""
    x_hat = np.asarray(x_hat, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x_hat.shape != x.shape:
        raise ContractViolationError(f"shape mismatch: {x_hat.shape} vs {x.shape}")
    return float(np.mean((x_hat - x) ** 2))


def ssim(x_hat, x) -> float:
    """Mean structural similarity over the batch (11x11 Gaussian window, sigma 1.5,
    pixel range [0,1], averaged over valid window positions)."""
    x_hat = np.asarray(x_hat, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x_hat.shape != x.shape:
        raise ContractViolationError(f"shape mismatch: {x_hat.shape} vs {x.shape}")
    if x_hat.ndim == 2:
        x_hat, x = x_hat[None, None], x[None, None]
    elif x_hat.ndim == 3:
        x_hat, x = x_hat[None], x[None]
    vals = [
        structural_similarity(
            x_hat[i, c],
            x[i, c],
            data_range=1.0,
            gaussian_weights=True,
            sigma=1.5,
            use_sample_covariance=False,
        )
        for i in range(x.shape[0])
        for c in range(x.shape[1])
    ]
    return float(np.mean(vals))


def weight_correlation_heatmap(
    classifier_weights,
    d_z: Optional[int] = None,
    out_png=None,
    out_csv=None,
) -> np.ndarray:
    """Per-class dependence pattern of the joint head: |W| max-normalized per row.

    Columns are representation dimensions (z block left, y block right when
    ``d_z`` is given). Optionally rendered to PNG and dumped as CSV.
    """
    w = np.abs(np.asarray(classifier_weights, dtype=np.float64))
    if w.ndim != 2:
        raise ContractViolationError(f"weights must be 2-D (classes, dims), got {w.shape}")
    row_max = w.max(axis=1, keepdims=True)
    heat = np.divide(w, row_max, out=np.zeros_like(w), where=row_max > 0)
    if out_csv is not None:
        np.savetxt(out_csv, heat, delimiter=",", fmt="%.6f")
    if out_png is not None:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(max(4, heat.shape[1] / 4), max(2, heat.shape[0] / 2)))
        ax.imshow(heat, cmap="viridis", aspect="auto", vmin=0.0, vmax=1.0)
        if d_z is not None:
            ax.axvline(d_z - 0.5, color="w", linewidth=1.5)
        ax.set_xlabel("representation dimension")
        ax.set_ylabel("class")
        fig.tight_layout()
        fig.savefig(out_png, dpi=120)
        plt.close(fig)
    return heat


def latent_traversal(
    bundle: ModelBundle,
    x: torch.Tensor,
    part: str,
    dim: int,
    steps: int,
    values: Optional[Sequence[float]] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Decode while sweeping one coordinate of the representation over [-3, 3].

    The z part of the base representation is the posterior mean (no sampling,
    so figures are reproducible). Returns (frames, plain reconstruction).
    """
    if bundle.spec.mode != SELF_SUPERVISED:
        raise ContractViolationError("latent traversal requires a self-supervised bundle")
    if part not in ("z", "y"):
        raise ContractViolationError(f"part must be z|y, got {part!r}")
    width = bundle.spec.d_z if part == "z" else bundle.spec.d_y
    if not (0 <= dim < width):
        raise ContractViolationError(f"dim {dim} out of range for part {part} (width {width})")
    if x.ndim == 3:
        x = x.unsqueeze(0)
    if x.shape[0] != 1:
        raise ContractViolationError("traversal takes a single image")
    with torch.no_grad():
        feat = bundle.features(x)
        post = bundle.posterior(feat)
        y = bundle.y_head(feat)
        base = torch.cat([post.mean, y], dim=-1)
        recon = solve(bundle, "r", base)[0]
        col = dim if part == "z" else bundle.spec.d_z + dim
        if values is None:
            values = np.linspace(-3.0, 3.0, steps)
        frames = []
        for v in values:
            rep = base.clone()
            rep[0, col] = float(v)
            frames.append(solve(bundle, "r", rep)[0])
    return torch.stack(frames), recon


def representations(
    bundle: ModelBundle, images: np.ndarray, batch_size: int = 256
) -> Tuple[np.ndarray, np.ndarray]:
    """Posterior z-means and deterministic y for a stack of images."""
    zs, ys = [], []
    with torch.no_grad():
        for i in range(0, images.shape[0], batch_size):
            x = torch.as_tensor(images[i : i + batch_size])
            feat = bundle.features(x)
            post = bundle.posterior(feat)
            zs.append(post.mean.numpy())
            ys.append(bundle.y_head(feat).numpy())
    return np.concatenate(zs), np.concatenate(ys)


def mig_for_dataset(
    bundle: ModelBundle,
    ds: FactorDataset,
    parts: Sequence[str] = ("z", "y", "r"),
    bins: int = DEFAULT_BINS,
    n_samples: int = DEFAULT_MIG_SAMPLES,
    seed: int = 0,
) -> dict:
    """MIG of the trained representation against the dataset's factors.

    Evaluates each requested slice of the representation; nuisance factors
    recorded on the dataset are masked out. Subsamples to ``n_samples``
    points (seeded) when the dataset is larger.
    """
    n = len(ds)
    if n > n_samples:
        rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF]))
        idx = rng.choice(n, size=n_samples, replace=False)
    else:
        idx = np.arange(n)
    images = ds.images[idx]
    factors = ds.factor_values[idx]
    names = ds.factor_spec.names
    mask = [name not in ds.nuisance for name in names]
    z, y = representations(bundle, images)
    slices = {"z": z, "y": y, "r": np.concatenate([z, y], axis=1)}
    return {
        part: mig_score(slices[part], factors, factor_names=names, factor_mask=mask, bins=bins)
        for part in parts
    }


def probe_predictability_mse(
    bundle: ModelBundle,
    images: np.ndarray,
    direction: str = "z_to_y",
    steps: int = 400,
    lr: float = 1e-3,
    batch_size: int = 128,
    seed: int = 0,
    standardize: bool = True,
) -> float:
    """Error of a freshly trained 2-layer probe mapping one part onto the other.

    Measures how much information about the other part survived training;
    the probe is independent of the bundle's own predictors. With
    ``standardize`` both representations are z-scored per dimension over the
    evaluation set first, so the result reflects dependence rather than raw
    scale (a mean predictor then scores about the target dimensionality).
    Returns the probe's final summed-square error per sample, averaged over
    the dataset.
    """
    z, y = representations(bundle, images)
    if direction == "z_to_y":
        src, tgt = z, y
    elif direction == "y_to_z":
        src, tgt = y, z
    else:
        raise ContractViolationError(f"direction must be z_to_y|y_to_z, got {direction!r}")
    if standardize:
        src = (src - src.mean(axis=0)) / np.maximum(src.std(axis=0), 1e-8)
        tgt = (tgt - tgt.mean(axis=0)) / np.maximum(tgt.std(axis=0), 1e-8)
    torch.manual_seed(seed)
    probe = torch.nn.Sequential(
        torch.nn.Linear(src.shape[1], 128), torch.nn.Tanh(), torch.nn.Linear(128, tgt.shape[1])
    )
    opt = torch.optim.Adam(probe.parameters(), lr=lr)
    src_t = torch.as_tensor(src)
    tgt_t = torch.as_tensor(tgt)
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, 1]))
    n = src_t.shape[0]
    for _ in range(steps):
        idx = torch.as_tensor(rng.integers(0, n, size=min(batch_size, n)))
        loss = predictability_loss(probe(src_t[idx]), tgt_t[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    with torch.no_grad():
        return float(predictability_loss(probe(src_t), tgt_t))
