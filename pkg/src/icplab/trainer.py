"""Two-phase alternating training loop, experiment state, and checkpointing.

Each step first lets the adversaries adapt (discriminator ascends its pair
objective, predictors descend their cross-prediction error) against frozen
encoder outputs, then takes one descent step on the assembled objective for
the encoder/solver group while the adversaries' parameters stay untouched.

All per-step randomness (sampling noise, negative-pair derangements) is
derived statelessly from (seed, step), and batch order from (seed, epoch),
so runs are replayable and checkpoint resume is exact without persisting
any RNG state.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import torch

from .datasets import (
    FactorDataset,
    FactorSpec,
    batch_at,
    generate_synthetic,
    load_cache,
    load_dsprites,
    make_classification_set,
    rule_from_name,
)
from .distributions import sample_reparam
from .errors import CheckpointError, ConfigurationError, DivergenceError
from .networks import (
    SUPERVISED,
    ArchSpec,
    ModelBundle,
    build,
    discriminate,
    predict_cross,
    solve,
)
from .objectives import (
    PRED_ERROR_CLIP,
    ICPHyperparams,
    TermBreakdown,
    assemble_loss,
    js_mi_estimate,
    mi_min_upper_bound,
    predictability_loss,
    random_derangement,
    reconstruction_loss,
    shuffle_pairs,
    supervised_inference_loss,
)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
MANIFEST_FILE = "manifest.json"
PARAMS_FILE = "params.bin"
OPTIM_FILE = "optim.pt"
METRICS_FILE = "metrics.jsonl"

METRIC_KEYS = (
    "step",
    "total",
    "synergy",
    "mi_max",
    "mi_min",
    "infer_z",
    "infer_y",
    "independence",
    "d_loss",
    "h_loss",
    "wall_time_s",
)


def apply_thread_env() -> None:
    """Bound substrate parallelism from ICP_LAB_THREADS, when set."""
    threads = os.environ.get("ICP_LAB_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))


@dataclass(frozen=True)
class DatasetConfig:
    """Declarative dataset reference resolved by ``build_dataset``."""

    kind: str = "synthetic"
    factors: Tuple[Tuple[str, int], ...] = (("scale", 4), ("posX", 8), ("posY", 8))
    image_size: Tuple[int, int] = (32, 32)
    renderer: str = "square"
    num_classes: Optional[int] = None
    rule: Optional[str] = None
    path: Optional[str] = None

    def __post_init__(self):
        if self.kind not in ("synthetic", "synthetic_classification", "dsprites", "cache"):
            raise ConfigurationError(
                f"dataset.kind must be synthetic|synthetic_classification|dsprites|cache, "
                f"got {self.kind!r}"
            )
        if self.kind in ("dsprites", "cache") and not self.path:
            raise ConfigurationError(f"dataset.kind {self.kind!r} requires dataset.path")
        if self.kind == "synthetic_classification":
            if self.num_classes is None or self.rule is None:
                raise ConfigurationError(
                    "synthetic_classification requires dataset.num_classes and dataset.rule"
                )


def build_dataset(dc: DatasetConfig) -> FactorDataset:
    if dc.kind == "dsprites":
        return load_dsprites(dc.path)
    if dc.kind == "cache":
        return load_cache(dc.path)
    spec = FactorSpec(factors=tuple(dc.factors), image_size=tuple(dc.image_size), renderer=dc.renderer)
    if dc.kind == "synthetic":
        return generate_synthetic(spec)
    rule = rule_from_name(dc.rule, spec, dc.num_classes)
    return make_classification_set(spec, dc.num_classes, rule)


@dataclass(frozen=True)
class TrainConfig:
    hp: ICPHyperparams
    arch: ArchSpec
    dataset: DatasetConfig
    output_dir: str
    steps: int = 1000
    batch_size: int = 64
    lr_main: float = 1e-3
    lr_d: float = 1e-4
    lr_h: float = 1e-4
    seed: int = 0
    log_every: int = 50
    checkpoint_every: int = 0  # 0 = only the final checkpoint
    adv_steps: int = 1
    patience: Optional[int] = None
    resume_from: Optional[str] = None

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigurationError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.steps < 0:
            raise ConfigurationError(f"steps must be >= 0, got {self.steps}")
        for name in ("lr_main", "lr_d", "lr_h"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.seed < 0:
            raise ConfigurationError(f"seed must be >= 0, got {self.seed}")
        if self.log_every < 1 or self.checkpoint_every < 0 or self.adv_steps < 1:
            raise ConfigurationError("log_every >= 1, checkpoint_every >= 0, adv_steps >= 1")


def effective_arch(arch: ArchSpec, variant: str) -> ArchSpec:
    """Widen the active branch of the doubled single-constraint baselines so
    their total representation width matches the split variants'."""
    if variant == "VIB_X2":
        return replace(arch, d_z=2 * arch.d_z)
    if variant == "DIM_STAR_X2":
        return replace(arch, d_y=2 * arch.d_y)
    return arch


@dataclass
class TrainState:
    bundle: ModelBundle
    opt_main: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    opt_h: torch.optim.Optimizer
    step: int
    config: TrainConfig


def init_state(config: TrainConfig) -> TrainState:
    bundle = build(effective_arch(config.arch, config.hp.variant), config.seed)
    return TrainState(
        bundle=bundle,
        opt_main=torch.optim.Adam(bundle.main_parameters(), lr=config.lr_main),
        opt_d=torch.optim.Adam(bundle.discriminator_parameters(), lr=config.lr_d),
        opt_h=torch.optim.Adam(bundle.predictor_parameters(), lr=config.lr_h),
        step=0,
        config=config,
    )


def _step_rngs(seed: int, step: int) -> Tuple[np.random.Generator, ...]:
    children = np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, step]).spawn(4)
    return tuple(np.random.default_rng(c) for c in children)


def _noise_like(bundle: ModelBundle, n: int, rng: np.random.Generator) -> torch.Tensor:
    dtype = next(bundle.parameters()).dtype
    draw = rng.standard_normal((n, bundle.spec.d_z))
    return torch.as_tensor(draw, dtype=dtype)


def compute_terms(
    bundle: ModelBundle,
    hp: ICPHyperparams,
    x: torch.Tensor,
    t: torch.Tensor,
    noise: torch.Tensor,
    neg_perm: Optional[np.ndarray],
    pred_targets: Optional[Tuple[torch.Tensor, torch.Tensor]] = None,
) -> TermBreakdown:
    """The variant's active loss terms for one batch, as one differentiable breakdown.

    This is the phase-2 objective; the discriminator and predictors
    participate with whatever parameters they currently hold.
    ``pred_targets`` (y_target, z_target) overrides the independence term's
    stop-gradient targets; finite-difference gradient checks need them held
    fixed, since the loss treats them as constants.
    """
    active = hp.active_terms
    feat = bundle.features(x)
    post = bundle.posterior(feat)
    z = sample_reparam(post, noise)
    y = bundle.y_head(feat)
    supervised = bundle.spec.mode == SUPERVISED

    def inference(which, rep):
        out = solve(bundle, which, rep)
        return supervised_inference_loss(out, t) if supervised else reconstruction_loss(out, t)

    infer_r = inference("r", torch.cat([z, y], dim=-1)) if "synergy" in active else None
    infer_z = inference("z", z) if "infer_z" in active else None
    infer_y = inference("y", y) if "infer_y" in active else None
    mi_min = None
    if "mi_min" in active:
        if not bool(torch.isfinite(post.mean).all() & torch.isfinite(post.log_var).all()):
            raise DivergenceError("non-finite posterior statistics")
        mi_min = mi_min_upper_bound(post)
    js = None
    if "mi_max" in active:
        y_neg = shuffle_pairs(y, neg_perm)
        js = js_mi_estimate(discriminate(bundle, feat, y), discriminate(bundle, feat, y_neg))
    pred_err = None
    if "independence" in active:
        y_target, z_target = (y, z) if pred_targets is None else pred_targets
        pred_err = predictability_loss(
            predict_cross(bundle, z, "z_to_y"), y_target, clip=PRED_ERROR_CLIP
        ) + predictability_loss(predict_cross(bundle, y, "y_to_z"), z_target, clip=PRED_ERROR_CLIP)
    return assemble_loss(
        hp, infer_r=infer_r, infer_z=infer_z, infer_y=infer_y, mi_min=mi_min, js=js, pred_err=pred_err
    )


def adversary_update(state: TrainState, x: torch.Tensor) -> Tuple[float, float]:
    """Phase 1: adapt discriminator and predictors against a frozen encoder.

    Encoder outputs are computed without gradients, so no encoder/solver
    parameter can move here. Returns the (pre-update) discriminator and
    predictor losses; 0.0 for adversaries the variant does not use.
    """
    hp = state.config.hp
    active = hp.active_terms
    uses_d = "mi_max" in active
    uses_h = "independence" in active
    if not (uses_d or uses_h):
        return 0.0, 0.0
    bundle = state.bundle
    noise_rng, der_rng, _, _ = _step_rngs(state.config.seed, state.step)
    with torch.no_grad():
        feat = bundle.features(x)
        post = bundle.posterior(feat)
        y = bundle.y_head(feat)
        z = sample_reparam(post, _noise_like(bundle, x.shape[0], noise_rng))
    d_loss = h_loss = 0.0
    for _ in range(state.config.adv_steps):
        if uses_d:
            perm = random_derangement(x.shape[0], der_rng)
            js = js_mi_estimate(
                discriminate(bundle, feat, y), discriminate(bundle, feat, shuffle_pairs(y, perm))
            )
            loss = -js
            state.opt_d.zero_grad()
            loss.backward()
            state.opt_d.step()
            d_loss = float(loss.detach())
        if uses_h:
            loss = predictability_loss(predict_cross(bundle, z, "z_to_y"), y) + predictability_loss(
                predict_cross(bundle, y, "y_to_z"), z
            )
            state.opt_h.zero_grad()
            loss.backward()
            state.opt_h.step()
            h_loss = float(loss.detach())
    return d_loss, h_loss


def main_update(state: TrainState, x: torch.Tensor, t: torch.Tensor) -> TermBreakdown:
    """Phase 2: one descent step on the assembled objective for encoder+solvers.

    Gradients flow through the frozen adversaries into the encoder, but only
    the main parameter group is stepped, so adversary parameters are
    bit-identical before and after.
    """
    bundle = state.bundle
    _, _, noise_rng, der_rng = _step_rngs(state.config.seed, state.step)
    noise = _noise_like(bundle, x.shape[0], noise_rng)
    perm = None
    if "mi_max" in state.config.hp.active_terms:
        perm = random_derangement(x.shape[0], der_rng)
    breakdown = compute_terms(bundle, state.config.hp, x, t, noise, perm)
    state.opt_main.zero_grad()
    breakdown.total.backward()
    state.opt_main.step()
    return breakdown


def train_step(state: TrainState, batch) -> Tuple[TrainState, dict]:
    """One full alternation (phase 1 then phase 2) on one batch."""
    x, t = batch
    x = torch.as_tensor(x)
    if tuple(x.shape[1:]) != state.bundle.spec.input_shape:
        raise ConfigurationError(
            f"batch images {tuple(x.shape)} do not match arch input_shape "
            f"{state.bundle.spec.input_shape}"
        )
    if state.bundle.spec.mode == SUPERVISED:
        t = torch.as_tensor(t)
        if t.ndim != 1 or t.shape[0] != x.shape[0]:
            raise ConfigurationError(f"labels shape {tuple(t.shape)} invalid for supervised mode")
    else:
        t = x
    d_loss, h_loss = adversary_update(state, x)
    breakdown = main_update(state, x, t)
    state.step += 1
    record = breakdown.as_floats()
    record["d_loss"] = d_loss
    record["h_loss"] = h_loss
    return state, record


def _check_dataset_matches(config: TrainConfig, ds: FactorDataset) -> None:
    arch = config.arch
    if tuple(ds.images.shape[1:]) != arch.input_shape:
        raise ConfigurationError(
            f"dataset images {ds.images.shape[1:]} do not match arch.input_shape {arch.input_shape}"
        )
    if arch.mode == SUPERVISED:
        if ds.labels is None:
            raise ConfigurationError("supervised mode requires a labeled dataset")
        if ds.num_classes > arch.num_classes:
            raise ConfigurationError(
                f"dataset has {ds.num_classes} classes but arch.num_classes={arch.num_classes}"
            )


def train(config: TrainConfig) -> Tuple[Path, Path]:
    """Run the step budget, logging metrics and checkpoints under output_dir.

    Returns (final checkpoint path, metrics log path). Convergence is step
    budget exhaustion, optionally cut short when the logged total stops
    improving for ``patience`` consecutive log events.
    """
    apply_thread_env()
    ds = build_dataset(config.dataset)
    _check_dataset_matches(config, ds)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_root = out / "checkpoints"

    if config.resume_from:
        state = load_checkpoint(config.resume_from, config=config)
    else:
        state = init_state(config)

    metrics_path = out / METRICS_FILE
    mode = "a" if config.resume_from and metrics_path.exists() else "w"
    t0 = time.perf_counter()
    best_total = float("inf")
    stale_logs = 0
    with open(metrics_path, mode) as metrics_file:
        for k in range(state.step, config.steps):
            x, t = batch_at(ds, config.batch_size, config.seed, k)
            try:
                state, rec = train_step(state, (x, t))
            except DivergenceError:
                save_checkpoint(state, ckpt_root / f"diverged_step_{state.step:06d}")
                raise
            done = k + 1
            if done % config.log_every == 0:
                rec["step"] = done
                rec["wall_time_s"] = time.perf_counter() - t0
                record = {key: rec[key] for key in METRIC_KEYS}
                metrics_file.write(json.dumps(record) + "\n")
                metrics_file.flush()
                if config.patience is not None:
                    if record["total"] < best_total - 1e-9:
                        best_total = record["total"]
                        stale_logs = 0
                    else:
                        stale_logs += 1
                        if stale_logs >= config.patience:
                            log.info("early stop at step %d (plateau)", done)
                            break
            if config.checkpoint_every and done % config.checkpoint_every == 0:
                save_checkpoint(state, ckpt_root / f"step_{done:06d}")
    final_path = ckpt_root / "final"
    save_checkpoint(state, final_path)
    return final_path, metrics_path


def config_to_dict(config: TrainConfig) -> dict:
    return asdict(config)


def config_from_dict(d: dict) -> TrainConfig:
    hp = ICPHyperparams(**d["hp"])
    arch_d = dict(d["arch"])
    arch_d["input_shape"] = tuple(arch_d["input_shape"])
    arch_d["trunk_widths"] = tuple(arch_d["trunk_widths"])
    arch = ArchSpec(**arch_d)
    ds_d = dict(d["dataset"])
    ds_d["factors"] = tuple((n, int(c)) for n, c in ds_d["factors"])
    ds_d["image_size"] = tuple(ds_d["image_size"])
    dataset = DatasetConfig(**ds_d)
    rest = {k: v for k, v in d.items() if k not in ("hp", "arch", "dataset")}
    return TrainConfig(hp=hp, arch=arch, dataset=dataset, **rest)


def config_hash(config: TrainConfig) -> str:
    """Content hash of the semantically relevant config (where the run writes
    and what it resumed from do not affect the trajectory)."""
    d = config_to_dict(config)
    d.pop("output_dir", None)
    d.pop("resume_from", None)
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def _param_layout(bundle: ModelBundle):
    layout = []
    offset = 0
    for name, p in bundle.named_parameters():
        layout.append({"name": name, "shape": list(p.shape), "offset": offset, "numel": p.numel()})
        offset += p.numel()
    return layout, offset


def save_checkpoint(state: TrainState, path) -> None:
    """Write manifest.json + params.bin (little-endian float32, order per
    manifest) plus the optimizer states needed for exact resume."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    layout, total = _param_layout(state.bundle)
    blob = bytearray()
    for _, p in state.bundle.named_parameters():
        blob += np.ascontiguousarray(p.detach().cpu().numpy(), dtype="<f4").tobytes()
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "step": state.step,
        "config": config_to_dict(state.config),
        "config_hash": config_hash(state.config),
        "param_layout": layout,
        "total_params": total,
        "files": {"params": PARAMS_FILE, "optimizer": OPTIM_FILE},
    }
    try:
        (path / PARAMS_FILE).write_bytes(bytes(blob))
        torch.save(
            {
                "opt_main": state.opt_main.state_dict(),
                "opt_d": state.opt_d.state_dict(),
                "opt_h": state.opt_h.state_dict(),
            },
            path / OPTIM_FILE,
        )
        (path / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2))
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint at {path}: {e}") from e


def load_checkpoint(path, config: Optional[TrainConfig] = None) -> TrainState:
    """Rebuild a TrainState bit-exactly from a checkpoint directory.

    When ``config`` is given (resume), its semantic hash must match the
    manifest's. No partial state escapes on error.
    """
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST_FILE).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"cannot read checkpoint manifest at {path}: {e}") from e
    version = manifest.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format_version {version} (supported: {CHECKPOINT_FORMAT_VERSION})"
        )
    stored = config_from_dict(manifest["config"])
    if config is not None and config_hash(config) != manifest["config_hash"]:
        raise CheckpointError(
            "config does not match checkpoint (semantic hash differs); refusing to resume"
        )
    effective = config if config is not None else stored
    state = init_state(effective)
    layout, total = _param_layout(state.bundle)
    if layout != manifest["param_layout"]:
        raise CheckpointError(
            "checkpoint parameter layout does not match the configured architecture"
        )
    raw = (path / PARAMS_FILE).read_bytes()
    if len(raw) != 4 * total:
        raise CheckpointError(
            f"params.bin has {len(raw)} bytes, expected {4 * total} for this architecture"
        )
    flat = np.frombuffer(raw, dtype="<f4")
    with torch.no_grad():
        for entry, (_, p) in zip(layout, state.bundle.named_parameters()):
            seg = flat[entry["offset"] : entry["offset"] + entry["numel"]]
            p.copy_(torch.from_numpy(seg.copy()).view(*entry["shape"]))
    try:
        opt_states = torch.load(path / OPTIM_FILE, weights_only=True)
        state.opt_main.load_state_dict(opt_states["opt_main"])
        state.opt_d.load_state_dict(opt_states["opt_d"])
        state.opt_h.load_state_dict(opt_states["opt_h"])
    except (OSError, RuntimeError, KeyError) as e:
        raise CheckpointError(f"cannot restore optimizer state from {path}: {e}") from e
    state.step = manifest["step"]
    return state
