"""Command-line entry point: reproducible train / eval / figures / ablation runs.

Configs are TOML with four sections (hp, arch, dataset, trainer) plus an
optional [ablation] section; any value can be overridden on the command
line with repeatable ``--set section.key=value`` flags. Exit codes: 0 ok,
2 configuration error, 3 training divergence, 4 I/O or checkpoint error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import statistics
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import metrics as metrics_mod
from .datasets import FactorDataset
from .errors import CheckpointError, ConfigurationError, DivergenceError
from .networks import SELF_SUPERVISED, SUPERVISED, ArchSpec, ModelBundle, solve
from .objectives import ICPHyperparams
from .trainer import (
    DatasetConfig,
    TrainConfig,
    apply_thread_env,
    build_dataset,
    config_hash,
    config_to_dict,
    effective_arch,
    load_checkpoint,
    train,
)

EXIT_OK = 0
EXIT_FAILED_ROWS = 1
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_IO = 4

DEFAULTS = {
    "hp": {"alpha": None, "beta": 0.1, "gamma": 0.1, "variant": "ICP"},
    "arch": {
        "input_shape": [1, 32, 32],
        "d_z": 8,
        "d_y": 8,
        "mode": "supervised",
        "num_classes": None,
        "trunk_widths": [32, 64, 64],
    },
    "dataset": {
        "kind": "synthetic",
        "factors": [["scale", 4], ["posX", 8], ["posY", 8]],
        "image_size": [32, 32],
        "renderer": "square",
        "num_classes": None,
        "rule": None,
        "path": None,
    },
    "trainer": {
        "output_dir": "runs/exp",
        "steps": 1000,
        "batch_size": 64,
        "lr_main": 1e-3,
        "lr_d": 1e-4,
        "lr_h": 1e-4,
        "seed": 0,
        "log_every": 50,
        "checkpoint_every": 0,
        "adv_steps": 1,
        "patience": None,
        "resume_from": None,
    },
    "ablation": {
        "seeds": [0, 1, 2],
        "variants": ["ICP_ALL", "VIB", "DIM_STAR", "VIB_X2", "DIM_STAR_X2", "ICP_COM", "ICP"],
    },
}


@dataclass
class ExperimentManifest:
    """Everything needed to reproduce a run and find its artifacts."""

    config: dict
    config_hash: str
    artifacts: dict
    started_at: str
    duration_s: float

    def write(self, path: Path) -> None:
        path.write_text(json.dumps(asdict(self), indent=2))


def _merge_section(name: str, user: dict) -> dict:
    if name not in DEFAULTS:
        raise ConfigurationError(
            f"unknown config section {name!r}; valid sections: {sorted(DEFAULTS)}"
        )
    merged = copy.deepcopy(DEFAULTS[name])
    for key, value in user.items():
        if key not in merged:
            raise ConfigurationError(
                f"unknown config key {name}.{key}; valid keys: {sorted(merged)}"
            )
        merged[key] = value
    return merged


def load_config(config_path: Optional[str], overrides: List[str]) -> dict:
    """Defaults <- TOML file <- --set overrides, with unknown-key errors."""
    user: dict = {}
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise ConfigurationError(f"config file not found: {path}")
        try:
            user = tomllib.loads(path.read_text())
        except tomllib.TOMLDecodeError as e:
            raise ConfigurationError(f"config file {path} is not valid TOML: {e}") from e
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"--set expects section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        parts = dotted.strip().split(".")
        if len(parts) != 2:
            raise ConfigurationError(f"--set expects section.key=value, got {item!r}")
        section, key = parts
        try:
            value = tomllib.loads(f"v = {raw}")["v"]
        except tomllib.TOMLDecodeError:
            value = raw  # bare string
        user.setdefault(section, {})[key] = value
    unknown = set(user) - set(DEFAULTS)
    if unknown:
        raise ConfigurationError(
            f"unknown config sections {sorted(unknown)}; valid sections: {sorted(DEFAULTS)}"
        )
    cfg = {}
    for section in DEFAULTS:
        cfg[section] = _merge_section(section, user.get(section, {}))
    return cfg


def build_train_config(cfg: dict, output_dir: Optional[str] = None, seed: Optional[int] = None) -> TrainConfig:
    a = cfg["arch"]
    arch = ArchSpec(
        input_shape=tuple(a["input_shape"]),
        d_z=int(a["d_z"]),
        d_y=int(a["d_y"]),
        mode=a["mode"],
        num_classes=None if a["num_classes"] is None else int(a["num_classes"]),
        trunk_widths=tuple(int(w) for w in a["trunk_widths"]),
    )
    h = cfg["hp"]
    alpha = h["alpha"]
    if alpha is None:
        eff = effective_arch(arch, h["variant"])
        alpha = 1e-3 * (eff.d_z + eff.d_y)
    hp = ICPHyperparams(alpha=float(alpha), beta=float(h["beta"]), gamma=float(h["gamma"]), variant=h["variant"])
    d = cfg["dataset"]
    dataset = DatasetConfig(
        kind=d["kind"],
        factors=tuple((str(n), int(c)) for n, c in d["factors"]),
        image_size=tuple(d["image_size"]),
        renderer=d["renderer"],
        num_classes=None if d["num_classes"] is None else int(d["num_classes"]),
        rule=d["rule"],
        path=d["path"],
    )
    t = cfg["trainer"]
    return TrainConfig(
        hp=hp,
        arch=arch,
        dataset=dataset,
        output_dir=str(output_dir if output_dir is not None else t["output_dir"]),
        steps=int(t["steps"]),
        batch_size=int(t["batch_size"]),
        lr_main=float(t["lr_main"]),
        lr_d=float(t["lr_d"]),
        lr_h=float(t["lr_h"]),
        seed=int(seed if seed is not None else t["seed"]),
        log_every=int(t["log_every"]),
        checkpoint_every=int(t["checkpoint_every"]),
        adv_steps=int(t["adv_steps"]),
        patience=None if t["patience"] is None else int(t["patience"]),
        resume_from=t["resume_from"],
    )


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    config = build_train_config(cfg, output_dir=args.output_dir, seed=args.seed)
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    t0 = time.perf_counter()
    ckpt, metrics_path = train(config)
    manifest = ExperimentManifest(
        config=config_to_dict(config),
        config_hash=config_hash(config),
        artifacts={"checkpoint": str(ckpt), "metrics": str(metrics_path)},
        started_at=started,
        duration_s=time.perf_counter() - t0,
    )
    manifest.write(Path(config.output_dir) / "manifest.json")
    print(f"checkpoint: {ckpt}")
    print(f"metrics: {metrics_path}")
    return EXIT_OK


def _head_logits(bundle: ModelBundle, images: np.ndarray, batch_size: int = 256) -> dict:
    outs = {"z": [], "y": [], "r": []}
    with torch.no_grad():
        for i in range(0, images.shape[0], batch_size):
            x = torch.as_tensor(images[i : i + batch_size])
            feat = bundle.features(x)
            post = bundle.posterior(feat)
            y = bundle.y_head(feat)
            reps = {"z": post.mean, "y": y, "r": torch.cat([post.mean, y], dim=-1)}
            for part, rep in reps.items():
                outs[part].append(solve(bundle, part, rep).numpy())
    return {part: np.concatenate(vals) for part, vals in outs.items()}


def _reconstructions(bundle: ModelBundle, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    outs = []
    with torch.no_grad():
        for i in range(0, images.shape[0], batch_size):
            x = torch.as_tensor(images[i : i + batch_size])
            feat = bundle.features(x)
            post = bundle.posterior(feat)
            y = bundle.y_head(feat)
            outs.append(solve(bundle, "r", torch.cat([post.mean, y], dim=-1)).numpy())
    return np.concatenate(outs)


def evaluate_checkpoint(checkpoint: str, metric_names: List[str], ds: Optional[FactorDataset] = None) -> dict:
    """Requested metrics per head, for the dataset the checkpoint was trained on
    (or an explicitly supplied one)."""
    state = load_checkpoint(checkpoint)
    bundle = state.bundle
    bundle.eval()
    if ds is None:
        ds = build_dataset(state.config.dataset)
    mode = bundle.spec.mode
    valid = {"error", "mig", "mse", "ssim"}
    unknown = set(metric_names) - valid
    if unknown:
        raise ConfigurationError(f"unknown metrics {sorted(unknown)}; valid: {sorted(valid)}")
    report: dict = {"checkpoint": str(checkpoint), "step": state.step, "mode": mode, "metrics": {}}
    if "error" in metric_names:
        if mode != SUPERVISED:
            raise ConfigurationError("metric 'error' requires a supervised checkpoint")
        if ds.labels is None:
            raise ConfigurationError("metric 'error' requires a labeled dataset")
        logits = _head_logits(bundle, ds.images)
        report["metrics"]["error"] = {
            part: metrics_mod.classification_error(lg, ds.labels) for part, lg in logits.items()
        }
    if "mig" in metric_names:
        migs = metrics_mod.mig_for_dataset(bundle, ds, seed=state.config.seed)
        report["metrics"]["mig"] = {part: rep.to_dict() for part, rep in migs.items()}
    if "mse" in metric_names or "ssim" in metric_names:
        if mode != SELF_SUPERVISED:
            raise ConfigurationError("metrics 'mse'/'ssim' require a self-supervised checkpoint")
        x_hat = _reconstructions(bundle, ds.images)
        if "mse" in metric_names:
            report["metrics"]["mse"] = metrics_mod.mse(x_hat, ds.images)
        if "ssim" in metric_names:
            report["metrics"]["ssim"] = metrics_mod.ssim(x_hat, ds.images)
    return report


def cmd_eval(args) -> int:
    metric_names = [m.strip() for m in args.metrics.split(",") if m.strip()]
    if not metric_names:
        raise ConfigurationError("--metrics must name at least one of error,mig,mse,ssim")
    ds = None
    if args.config is not None:
        cfg = load_config(args.config, args.set)
        ds = build_dataset(build_train_config(cfg).dataset)
    report = evaluate_checkpoint(args.checkpoint, metric_names, ds=ds)
    text = json.dumps(report, indent=2)
    print(text)
    if args.output_dir is not None:
        out = Path(args.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(text)
    return EXIT_OK


def cmd_figures(args) -> int:
    state = load_checkpoint(args.checkpoint)
    bundle = state.bundle
    bundle.eval()
    out = Path(args.output_dir) if args.output_dir else Path(args.checkpoint).parent.parent
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "heatmap":
        if bundle.spec.mode != SUPERVISED:
            raise ConfigurationError("heatmap figures require a supervised checkpoint")
        weights = bundle.solver_r.weight.detach().numpy()
        metrics_mod.weight_correlation_heatmap(
            weights, d_z=bundle.spec.d_z, out_png=out / "heatmap.png", out_csv=out / "heatmap.csv"
        )
        print(f"wrote {out / 'heatmap.png'} and {out / 'heatmap.csv'}")
        return EXIT_OK
    if bundle.spec.mode != SELF_SUPERVISED:
        raise ConfigurationError("traversal figures require a self-supervised checkpoint")
    ds = build_dataset(state.config.dataset)
    x = torch.as_tensor(ds.images[args.image_index : args.image_index + 1])
    spec = bundle.spec
    if args.dims == "all":
        targets = [("z", i) for i in range(spec.d_z)] + [("y", i) for i in range(spec.d_y)]
    else:
        cols = [int(c) for c in args.dims.split(",")]
        targets = [("z", c) if c < spec.d_z else ("y", c - spec.d_z) for c in cols]
    for part, dim in targets:
        frames, recon = metrics_mod.latent_traversal(bundle, x, part, dim, args.steps)
        _save_traversal(out, part, dim, frames, recon, args.steps)
    print(f"wrote {len(targets)} traversal grids under {out}")
    return EXIT_OK


def _save_traversal(out: Path, part: str, dim: int, frames, recon, steps: int) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    stem = f"traversal_{part}{dim:02d}"
    n = frames.shape[0]
    fig, axes = plt.subplots(1, n + 1, figsize=(1.2 * (n + 1), 1.5))
    values = np.linspace(-3.0, 3.0, steps)
    for i in range(n):
        axes[i].imshow(frames[i, 0].numpy(), cmap="gray", vmin=0, vmax=1)
        axes[i].set_title(f"{values[i]:.1f}", fontsize=6)
        axes[i].axis("off")
    axes[n].imshow(recon[0].numpy(), cmap="gray", vmin=0, vmax=1)
    axes[n].set_title("recon", fontsize=6)
    axes[n].axis("off")
    fig.tight_layout()
    fig.savefig(out / f"{stem}.png", dpi=120)
    plt.close(fig)
    with open(out / f"{stem}.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["frame", "value", "mse_vs_recon"])
        for i in range(n):
            dev = float(((frames[i] - recon) ** 2).mean())
            writer.writerow([i, f"{values[i]:.4f}", f"{dev:.8f}"])


def cmd_ablation(args) -> int:
    cfg = load_config(args.config, args.set)
    seeds = [int(s) for s in cfg["ablation"]["seeds"]]
    variants = list(cfg["ablation"]["variants"])
    out = Path(args.output_dir if args.output_dir else cfg["trainer"]["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    base_mode = cfg["arch"]["mode"]
    metric_name = "error_r_pct" if base_mode == "supervised" else "mig_r"
    rows = []
    for variant in variants:
        values = []
        failed = False
        for seed in seeds:
            run_cfg = copy.deepcopy(cfg)
            run_cfg["hp"]["variant"] = variant
            run_dir = out / "runs" / f"{variant}_seed{seed}"
            try:
                config = build_train_config(run_cfg, output_dir=str(run_dir), seed=seed)
                ckpt, _ = train(config)
                if base_mode == "supervised":
                    rep = evaluate_checkpoint(str(ckpt), ["error"])
                    values.append(rep["metrics"]["error"]["r"])
                else:
                    rep = evaluate_checkpoint(str(ckpt), ["mig"])
                    values.append(rep["metrics"]["mig"]["r"]["score"])
            except Exception as e:  # a failed run marks the row, sweep continues
                print(f"run {variant} seed {seed} failed: {e}", file=sys.stderr)
                failed = True
        rows.append((variant, values, failed))

    def median_or_none(vals):
        return statistics.median(vals) if vals else None

    baseline = next((median_or_none(v) for name, v, f in rows if name == "ICP_ALL" and not f), None)
    table_path = out / "ablation.csv"
    text_lines = [f"{'variant':<14}{metric_name:>14}{'delta_vs_ICP_ALL':>20}  status"]
    with open(table_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["variant", metric_name, "delta_vs_ICP_ALL", "status", "per_seed"])
        for name, values, failed in rows:
            med = median_or_none(values)
            status = "failed" if failed else "ok"
            delta = None if (med is None or baseline is None) else med - baseline
            writer.writerow(
                [
                    name,
                    "" if med is None else f"{med:.4f}",
                    "" if delta is None else f"{delta:+.4f}",
                    status,
                    ";".join(f"{v:.4f}" for v in values),
                ]
            )
            text_lines.append(
                f"{name:<14}{'--' if med is None else f'{med:>14.4f}'}"
                f"{'--' if delta is None else f'{delta:>+20.4f}'}  {status}"
            )
    text = "\n".join(text_lines)
    (out / "ablation.txt").write_text(text + "\n")
    print(text)
    return EXIT_FAILED_ROWS if any(f for _, _, f in rows) else EXIT_OK


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="TOML config file")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a config value (repeatable)")
    p.add_argument("--output-dir", default=None, help="run directory (all artifacts go here)")
    p.add_argument("--seed", type=int, default=None, help="override trainer.seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="icplab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run the two-phase training loop")
    _add_common(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="compute metrics for a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--metrics", required=True, help="comma list of error,mig,mse,ssim")
    _add_common(p_eval)
    p_eval.set_defaults(func=cmd_eval)

    p_fig = sub.add_parser("figures", help="emit heatmap or traversal artifacts")
    p_fig.add_argument("--checkpoint", required=True)
    p_fig.add_argument("--kind", required=True, choices=["heatmap", "traversal"])
    p_fig.add_argument("--dims", default="all", help="'all' or comma list of representation dims")
    p_fig.add_argument("--steps", type=int, default=10)
    p_fig.add_argument("--image-index", type=int, default=0)
    _add_common(p_fig)
    p_fig.set_defaults(func=cmd_figures)

    p_abl = sub.add_parser("ablation", help="variant sweep over shared seeds")
    _add_common(p_abl)
    p_abl.set_defaults(func=cmd_ablation)
    return parser


def main(argv=None) -> int:
    apply_thread_env()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (CheckpointError, OSError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
