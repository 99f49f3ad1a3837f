"""Factor-controlled synthetic sprites, archive ingestion, and deterministic batching.

Synthetic images are white sprites on black, rendered as an exhaustive
Cartesian product over quantized factors (scale / rotation / posX / posY).
Rendering is fully deterministic; axis-aligned squares use exact pixel
fills so scale and position are recoverable from mass and centroid.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    ConfigurationError,
    ContractViolationError,
    GenerationError,
    IngestionError,
)

log = logging.getLogger(__name__)

FACTOR_NAMES = ("scale", "rotation", "posX", "posY")
DSPRITES_CARDINALITIES = (3, 6, 40, 32, 32)
DSPRITES_FACTOR_NAMES = ("shape", "scale", "rotation", "posX", "posY")

CACHE_SPEC = "spec.json"
CACHE_DATA = "data.bin"
CACHE_FACTORS = "factors.bin"
CACHE_LABELS = "labels.bin"


@dataclass(frozen=True)
class FactorSpec:
    """Ordered factor list plus rendering parameters for a synthetic set."""

    factors: Tuple[Tuple[str, int], ...]
    image_size: Tuple[int, int] = (32, 32)
    renderer: str = "square"

    def __post_init__(self):
        if not self.factors:
            raise ConfigurationError("factors must be non-empty")
        names = [n for n, _ in self.factors]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"duplicate factor names in {names}")
        for name, card in self.factors:
            if card < 2:
                raise ConfigurationError(f"factor {name!r} cardinality must be >= 2, got {card}")
        if self.renderer not in ("square", "ellipse", "external"):
            raise ConfigurationError(f"renderer must be square|ellipse, got {self.renderer!r}")
        h, w = self.image_size
        if h < 8 or w < 8:
            raise ConfigurationError(f"image_size too small: {self.image_size}")

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(n for n, _ in self.factors)

    @property
    def cardinalities(self) -> Tuple[int, ...]:
        return tuple(c for _, c in self.factors)

    @property
    def num_combinations(self) -> int:
        return int(np.prod(self.cardinalities))

    def index_of(self, name: str) -> Optional[int]:
        return self.names.index(name) if name in self.names else None


@dataclass
class FactorDataset:
    """Images paired with the integer factor indices that generated them."""

    images: np.ndarray  # (N, 1, H, W) float32 in [0, 1]
    factor_values: np.ndarray  # (N, K) int64
    factor_spec: FactorSpec
    labels: Optional[np.ndarray] = None  # (N,) int64 class indices
    nuisance: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] != self.factor_values.shape[0]:
            raise ContractViolationError(
                f"images {self.images.shape} / factor_values {self.factor_values.shape} mismatch"
            )
        if self.labels is not None and self.labels.shape != (self.images.shape[0],):
            raise ContractViolationError(f"labels shape {self.labels.shape} invalid")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def num_classes(self) -> Optional[int]:
        return None if self.labels is None else int(self.labels.max()) + 1


@dataclass(frozen=True)
class _Layout:
    """Pixel geometry shared by every image of a synthetic set."""

    sides: Tuple[int, ...]  # per scale index (or a single default)
    centers_x: Tuple[int, ...]
    centers_y: Tuple[int, ...]
    angles: Tuple[float, ...]


def _positions(extent: int, count: int, radius: int, axis: str) -> Tuple[int, ...]:
    lo, hi = radius, extent - 1 - radius
    if lo > hi:
        raise GenerationError(
            f"sprite out of frame: largest sprite (radius {radius}px) does not fit a "
            f"{extent}px {axis} axis"
        )
    if count == 1:
        return ((lo + hi) // 2,)
    step = (hi - lo) // (count - 1)
    if step < 1:
        raise GenerationError(
            f"sprite out of frame: {count} {axis} positions need >= {count + 2 * radius - 1}px, "
            f"axis has {extent}px (largest sprite at the extreme positions overflows)"
        )
    start = lo + ((hi - lo) - (count - 1) * step) // 2
    return tuple(start + i * step for i in range(count))


def _sprite_layout(spec: FactorSpec) -> _Layout:
    h, w = spec.image_size
    cards = dict(spec.factors)
    if "scale" in cards:
        sides = tuple(5 + 2 * s for s in range(cards["scale"]))
    else:
        sides = (7,)
    side_max = sides[-1]
    rotated = "rotation" in cards
    if spec.renderer == "ellipse":
        extent = math.ceil(side_max / 2 + 1)
    elif rotated:
        extent = math.ceil((side_max / 2 + 0.5) * math.sqrt(2.0))
    else:
        extent = (side_max - 1) // 2
    radius = extent + 1  # keep one empty border pixel
    centers_x = _positions(w, cards.get("posX", 1), radius, "posX")
    centers_y = _positions(h, cards.get("posY", 1), radius, "posY")
    n_rot = cards.get("rotation", 1)
    angles = tuple(2.0 * math.pi * r / n_rot for r in range(n_rot))
    return _Layout(sides, centers_x, centers_y, angles)


def _render(spec: FactorSpec, layout: _Layout, combo: dict) -> np.ndarray:
    h, w = spec.image_size
    side = layout.sides[combo.get("scale", 0)]
    cx = layout.centers_x[combo.get("posX", 0)]
    cy = layout.centers_y[combo.get("posY", 0)]
    angle = layout.angles[combo.get("rotation", 0)]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xs - cx, ys - cy
    c, s = math.cos(angle), math.sin(angle)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    half = side / 2.0
    if spec.renderer == "square":
        # Per-axis coverage; for angle 0 and odd sides this is an exact
        # pixel fill (mass = side^2), which the inverse probes rely on.
        img = np.clip(half - np.abs(u) + 0.5, 0.0, 1.0) * np.clip(half - np.abs(v) + 0.5, 0.0, 1.0)
    else:
        a, b = half, 0.6 * half
        rho = np.sqrt((u / a) ** 2 + (v / b) ** 2)
        img = np.clip((1.0 - rho) * b + 0.5, 0.0, 1.0)
    if img[0, :].any() or img[-1, :].any() or img[:, 0].any() or img[:, -1].any():
        raise GenerationError(f"sprite out of frame for combination {combo}")
    return img.astype(np.float32)


def generate_synthetic(spec: FactorSpec) -> FactorDataset:
    """Exhaustively render the Cartesian product of the spec's factor values."""
    unknown = set(spec.names) - set(FACTOR_NAMES)
    if unknown:
        raise ConfigurationError(
            f"unknown factors {sorted(unknown)}; synthetic factors are {FACTOR_NAMES}"
        )
    if spec.renderer == "external":
        raise ConfigurationError("renderer 'external' is reserved for ingested archives")
    layout = _sprite_layout(spec)
    cards = spec.cardinalities
    n = spec.num_combinations
    h, w = spec.image_size
    images = np.empty((n, 1, h, w), dtype=np.float32)
    factor_values = np.empty((n, len(cards)), dtype=np.int64)
    for i, idx in enumerate(np.ndindex(*cards)):
        factor_values[i] = idx
        combo = dict(zip(spec.names, idx))
        images[i, 0] = _render(spec, layout, combo)
    return FactorDataset(images, factor_values, spec)


def recover_square_factors(image: np.ndarray, spec: FactorSpec) -> dict:
    """Invert the square renderer: mass -> scale bin, centroid -> posX/posY bins.

    Exact for axis-aligned squares (no rotation factor).
    """
    layout = _sprite_layout(spec)
    img = image[0] if image.ndim == 3 else image
    mass = float(img.sum(dtype=np.float64))
    out = {}
    if "scale" in spec.names:
        sides = [s * s for s in layout.sides]
        if mass not in sides:
            raise ContractViolationError(f"mass {mass} matches no scale bin {sides}")
        out["scale"] = sides.index(mass)
    ys, xs = np.mgrid[0 : img.shape[0], 0 : img.shape[1]]
    cx = float((xs * img).sum(dtype=np.float64) / mass)
    cy = float((ys * img).sum(dtype=np.float64) / mass)
    if "posX" in spec.names:
        if cx not in layout.centers_x:
            raise ContractViolationError(f"centroid x {cx} matches no posX center {layout.centers_x}")
        out["posX"] = layout.centers_x.index(cx)
    if "posY" in spec.names:
        if cy not in layout.centers_y:
            raise ContractViolationError(f"centroid y {cy} matches no posY center {layout.centers_y}")
        out["posY"] = layout.centers_y.index(cy)
    return out


def rule_from_name(name: str, spec: FactorSpec, num_classes: int) -> Callable[[Tuple[int, ...]], int]:
    """Named factor-to-label rules usable from config files.

    ``quadrant`` splits posX/posY at their midpoints into 4 classes;
    ``<factor>_mod`` takes a factor index modulo num_classes.
    """
    if name == "quadrant":
        if num_classes != 4:
            raise ConfigurationError("rule 'quadrant' requires num_classes=4")
        ix, iy = spec.index_of("posX"), spec.index_of("posY")
        if ix is None or iy is None:
            raise ConfigurationError("rule 'quadrant' requires posX and posY factors")
        cx = dict(spec.factors)["posX"] // 2
        cy = dict(spec.factors)["posY"] // 2
        return lambda t: (2 if t[ix] >= cx else 0) + (1 if t[iy] >= cy else 0)
    if name.endswith("_mod"):
        factor = name[: -len("_mod")]
        idx = spec.index_of(factor)
        if idx is None:
            raise ConfigurationError(f"rule {name!r}: factor {factor!r} not in spec {spec.names}")
        return lambda t: t[idx] % num_classes
    raise ConfigurationError(f"unknown rule {name!r}; use 'quadrant' or '<factor>_mod'")


def make_classification_set(
    spec: FactorSpec, num_classes: int, rule: Callable[[Tuple[int, ...]], int]
) -> FactorDataset:
    """Synthetic set with labels assigned by a total factor-tuple -> class rule."""
    if num_classes < 2:
        raise ConfigurationError(f"num_classes must be >= 2, got {num_classes}")
    ds = generate_synthetic(spec)
    labels = np.empty(len(ds), dtype=np.int64)
    for i, row in enumerate(ds.factor_values):
        c = rule(tuple(int(v) for v in row))
        if not (0 <= c < num_classes):
            raise ConfigurationError(
                f"rule yielded class {c} outside [0, {num_classes}) for factors {tuple(row)}"
            )
        labels[i] = c
    counts = np.bincount(labels, minlength=num_classes)
    log.info("classification set: %d samples, class counts %s", len(ds), counts.tolist())
    return FactorDataset(ds.images, ds.factor_values, spec, labels=labels)


def _seed_seq(*parts: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([p & 0xFFFFFFFFFFFFFFFF for p in parts])


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    """The seed-determined sample order for one epoch (stateless in epoch)."""
    return np.random.default_rng(_seed_seq(seed, epoch)).permutation(n)


def batch_at(
    ds: FactorDataset, batch_size: int, seed: int, step: int
) -> Tuple[np.ndarray, np.ndarray]:
    """The (x, t) batch a training run sees at ``step``; pure in its arguments.

    Epochs are implicit: step k falls in epoch k // (N // batch_size). The
    final short batch of each epoch is dropped so every batch supports
    within-batch negative pairing.
    """
    if batch_size < 2:
        raise ContractViolationError(f"batch_size must be >= 2, got {batch_size}")
    n = len(ds)
    if batch_size > n:
        raise ConfigurationError(f"batch_size {batch_size} exceeds dataset size {n}")
    per_epoch = n // batch_size
    epoch, slot = divmod(step, per_epoch)
    perm = epoch_permutation(n, seed, epoch)
    idx = perm[slot * batch_size : (slot + 1) * batch_size]
    x = ds.images[idx]
    t = ds.labels[idx] if ds.labels is not None else x
    return x, t


def batches(
    ds: FactorDataset, batch_size: int, seed: int, epochs: int
) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Deterministic batch sequence over ``epochs`` full passes."""
    if batch_size < 2:
        raise ContractViolationError(f"batch_size must be >= 2, got {batch_size}")
    if batch_size > len(ds):
        raise ConfigurationError(f"batch_size {batch_size} exceeds dataset size {len(ds)}")
    per_epoch = len(ds) // batch_size
    for step in range(epochs * per_epoch):
        yield batch_at(ds, batch_size, seed, step)


def save_cache(ds: FactorDataset, path) -> None:
    """Write a dataset as raw little-endian blobs plus a JSON spec."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / CACHE_DATA).write_bytes(np.ascontiguousarray(ds.images, dtype="<f4").tobytes())
    (path / CACHE_FACTORS).write_bytes(np.ascontiguousarray(ds.factor_values, dtype="<i4").tobytes())
    meta = {
        "factors": [[n, c] for n, c in ds.factor_spec.factors],
        "image_size": list(ds.factor_spec.image_size),
        "renderer": ds.factor_spec.renderer,
        "n": len(ds),
        "image_shape": list(ds.images.shape[1:]),
        "has_labels": ds.labels is not None,
        "nuisance": list(ds.nuisance),
    }
    if ds.labels is not None:
        (path / CACHE_LABELS).write_bytes(np.ascontiguousarray(ds.labels, dtype="<i4").tobytes())
    (path / CACHE_SPEC).write_text(json.dumps(meta, indent=2))


def load_cache(path) -> FactorDataset:
    path = Path(path)
    try:
        meta = json.loads((path / CACHE_SPEC).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise IngestionError(f"unreadable dataset cache at {path}: {e}") from e
    spec = FactorSpec(
        factors=tuple((n, int(c)) for n, c in meta["factors"]),
        image_size=tuple(meta["image_size"]),
        renderer=meta["renderer"],
    )
    n = meta["n"]
    shape = (n, *meta["image_shape"])
    images = np.frombuffer((path / CACHE_DATA).read_bytes(), dtype="<f4").reshape(shape)
    factors = np.frombuffer((path / CACHE_FACTORS).read_bytes(), dtype="<i4").reshape(n, -1)
    labels = None
    if meta["has_labels"]:
        labels = np.frombuffer((path / CACHE_LABELS).read_bytes(), dtype="<i4").astype(np.int64)
    return FactorDataset(
        images.copy(),
        factors.astype(np.int64),
        spec,
        labels=labels,
        nuisance=tuple(meta.get("nuisance", ())),
    )


def load_dsprites(path, strict: bool = True) -> FactorDataset:
    """Ingest the standard 2D-shapes archive (zipped arrays).

    Expects ``imgs`` (N, 64, 64) binary and ``latents_classes`` (N, 6) with a
    constant color column followed by shape/scale/rotation/posX/posY indices.
    With ``strict`` the published cardinalities (3, 6, 40, 32, 32) are
    required. The shape column is kept but flagged as a nuisance factor.
    """
    try:
        archive = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as e:
        raise IngestionError(f"cannot read archive at {path}: {e}") from e
    missing = {"imgs", "latents_classes"} - set(archive.files)
    if missing:
        raise IngestionError(
            f"archive missing arrays: expected imgs, latents_classes; found {archive.files}"
        )
    imgs = archive["imgs"]
    latents = archive["latents_classes"]
    if imgs.ndim != 3 or imgs.shape[1:] != (64, 64):
        raise IngestionError(f"imgs: expected (N, 64, 64), found {imgs.shape}")
    if latents.ndim != 2 or latents.shape != (imgs.shape[0], 6):
        raise IngestionError(
            f"latents_classes: expected ({imgs.shape[0]}, 6), found {latents.shape}"
        )
    factor_values = latents[:, 1:].astype(np.int64)  # drop the constant color column
    cards = tuple(int(factor_values[:, k].max()) + 1 for k in range(5))
    if strict and cards != DSPRITES_CARDINALITIES:
        raise IngestionError(
            f"factor cardinalities: expected {DSPRITES_CARDINALITIES}, found {cards}"
        )
    spec = FactorSpec(
        factors=tuple(zip(DSPRITES_FACTOR_NAMES, cards)),
        image_size=(64, 64),
        renderer="external",
    )
    images = imgs.astype(np.float32).reshape(-1, 1, 64, 64)
    return FactorDataset(images, factor_values, spec, nuisance=("shape",))
