"""Synthetic two-scale segmentation tasks, dataset files, and the Dice metric.

Each sample scatters anti-aliased geometric objects (spheres, cuboids,
tubes) over a quiet background. Small objects (class 1) and large objects
(class 2) share one intensity distribution, so telling them apart requires
spatial context rather than per-voxel brightness; that makes multi-scale
aggregation measurably matter. Labels are the hard geometric predicates and
always partition the volume; intensities get additive Gaussian noise and
per-sample normalization to zero mean, unit std.

Generation is deterministic: sample i draws from numpy's PCG64 seeded with
(seed, i), and the dataset manifest records the generator name.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, ShapeError
from .tensor import Tensor, load_tensor, save_tensor

DATASET_SCHEMA = "agg_dataset_v1"
PRNG_NAME = "numpy-pcg64"


@dataclass(frozen=True)
class SyntheticTaskSpec:
    rank: int = 2
    extent: int = 64
    num_classes: int = 3
    objects_per_class: int = 2
    small_radius: tuple[float, float] = (2.0, 4.0)
    large_radius: tuple[float, float] = (8.0, 12.0)
    noise_std: float = 0.1
    samples: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.rank not in (2, 3):
            raise ConfigError(f"task.rank must be 2 or 3, got {self.rank}")
        if self.num_classes != 3:
            raise ConfigError(f"task.num_classes must be 3, got {self.num_classes}")
        if self.samples < 1:
            raise ConfigError(f"task.samples must be >= 1, got {self.samples}")
        if self.noise_std < 0:
            raise ConfigError(f"task.noise_std must be >= 0, got {self.noise_std}")
        for name in ("small_radius", "large_radius"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise ConfigError(f"task.{name} must satisfy 0 < lo <= hi, got {(lo, hi)}")
        margin = int(np.ceil(self.large_radius[1])) + 1
        if self.extent < 2 * margin + 2:
            raise ConfigError(f"task.extent {self.extent} too small for large radius "
                              f"up to {self.large_radius[1]}")

    @property
    def spatial(self) -> tuple[int, ...]:
        return (self.extent,) * self.rank


@dataclass
class Sample:
    image: np.ndarray   # [1, spatial...] float64, normalized
    label: np.ndarray   # [spatial...] uint8


def _coords(spatial: tuple[int, ...]) -> list[np.ndarray]:
    return list(np.meshgrid(*(np.arange(e, dtype=np.float64) for e in spatial),
                            indexing="ij"))


def _object_fields(shape_kind: str, coords, center, radius, rng):
    """(coverage in [0,1], inside predicate) for one object."""
    deltas = [c - ctr for c, ctr in zip(coords, center)]
    if shape_kind == "sphere":
        dist = np.sqrt(sum(d * d for d in deltas))
        coverage = np.clip(radius - dist + 0.5, 0.0, 1.0)
        inside = dist <= radius
    elif shape_kind == "cuboid":
        halves = [radius * rng.uniform(0.6, 1.0) for _ in deltas]
        per_dim = [np.clip(h - np.abs(d) + 0.5, 0.0, 1.0) for d, h in zip(deltas, halves)]
        coverage = np.minimum.reduce(per_dim)
        inside = np.all([np.abs(d) <= h for d, h in zip(deltas, halves)], axis=0)
    elif shape_kind == "tube":
        axis = rng.integers(0, len(deltas))
        cross = [d for i, d in enumerate(deltas) if i != axis]
        cr = max(radius * 0.5, 1.0)
        half_len = 2.0 * radius
        cdist = np.sqrt(sum(d * d for d in cross)) if cross else 0.0
        along = np.abs(deltas[axis])
        coverage = np.minimum(np.clip(cr - cdist + 0.5, 0.0, 1.0),
                              np.clip(half_len - along + 0.5, 0.0, 1.0))
        inside = (cdist <= cr) & (along <= half_len)
    else:
        raise ConfigError(f"unknown object shape {shape_kind!r}")
    return coverage, inside


_SHAPES = ("sphere", "cuboid", "tube")


def generate_sample(spec: SyntheticTaskSpec, index: int) -> Sample:
    rng = np.random.default_rng([spec.seed, index])
    coords = _coords(spec.spatial)
    coverage = np.zeros(spec.spatial)
    label = np.zeros(spec.spatial, dtype=np.uint8)
    # Large objects (class 2) first; small (class 1) paint over on overlap,
    # which keeps every class present in every sample.
    for cls, (lo, hi) in ((2, spec.large_radius), (1, spec.small_radius)):
        for _ in range(spec.objects_per_class):
            radius = rng.uniform(lo, hi)
            margin = int(np.ceil(2.0 * radius)) + 1 if cls == 2 else int(np.ceil(radius)) + 1
            margin = min(margin, spec.extent // 2 - 1)
            center = [rng.uniform(margin, e - 1 - margin) for e in spec.spatial]
            kind = _SHAPES[rng.integers(0, len(_SHAPES))]
            cov, inside = _object_fields(kind, coords, center, radius, rng)
            coverage = np.maximum(coverage, cov)
            label[inside] = cls
    image = coverage
    if spec.noise_std > 0:
        image = image + rng.normal(0.0, spec.noise_std, size=spec.spatial)
    std = image.std()
    image = (image - image.mean()) / (std if std > 0 else 1.0)
    return Sample(image=image[None].astype(np.float64), label=label)


def generate(spec: SyntheticTaskSpec) -> list[Sample]:
    """Deterministic dataset for the spec; same seed gives identical bytes."""
    return [generate_sample(spec, i) for i in range(spec.samples)]


def save_dataset(directory, spec: SyntheticTaskSpec, samples: list[Sample]) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        save_tensor(d / f"img_{i:04d}.agt", Tensor(s.image))
        save_tensor(d / f"lbl_{i:04d}.agt", Tensor(s.label))
    manifest = {
        "schema": DATASET_SCHEMA,
        "prng": PRNG_NAME,
        "task": asdict(spec),
        "sample_count": len(samples),
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_dataset(directory) -> tuple[SyntheticTaskSpec, list[Sample]]:
    d = Path(directory)
    mf = d / "manifest.json"
    if not mf.exists():
        raise FormatError(f"{d}: no dataset manifest.json")
    doc = json.loads(mf.read_text())
    if doc.get("schema") != DATASET_SCHEMA:
        raise FormatError(f"{d}: unknown dataset schema {doc.get('schema')!r}")
    task = doc["task"]
    for key in ("small_radius", "large_radius"):
        task[key] = tuple(task[key])
    spec = SyntheticTaskSpec(**task)
    samples = []
    for i in range(doc["sample_count"]):
        img = load_tensor(d / f"img_{i:04d}.agt").data
        lbl = load_tensor(d / f"lbl_{i:04d}.agt").data
        samples.append(Sample(image=img, label=lbl))
    return spec, samples


def batch_arrays(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([s.image for s in samples])
    labels = np.stack([s.label for s in samples])
    return images, labels


def flip_augment(images: np.ndarray, labels: np.ndarray,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random per-batch spatial flips; the only augmentation used."""
    rank = images.ndim - 2
    for axis in range(rank):
        if rng.random() < 0.5:
            images = np.flip(images, axis=2 + axis)
            labels = np.flip(labels, axis=1 + axis)
    return np.ascontiguousarray(images), np.ascontiguousarray(labels)


def dice(pred, truth, cls: int) -> float:
    """2|P∩T| / (|P|+|T|) for one class; 1.0 when both sets are empty."""
    p = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    t = truth.data if isinstance(truth, Tensor) else np.asarray(truth)
    if p.shape != t.shape:
        raise ShapeError(f"dice: shape mismatch {p.shape} vs {t.shape}")
    pm = p == cls
    tm = t == cls
    denom = int(pm.sum()) + int(tm.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((pm & tm).sum()) / denom


def dice_per_class(pred, truth, num_classes: int) -> list[float]:
    return [dice(pred, truth, c) for c in range(num_classes)]


def mean_foreground_dice(pred, truth, num_classes: int) -> float:
    """Mean Dice over foreground classes (1..C-1), the headline metric."""
    scores = dice_per_class(pred, truth, num_classes)
    return float(np.mean(scores[1:]))
