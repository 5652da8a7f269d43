"""Dataset synthesis, ingestion, splitting, binning and bag construction.

Everything here is deterministic under an explicit seed and immutable after
construction. Samples store images (or plain feature vectors) as float arrays
in [0, 1]; labels are contiguous class indices; optional concept labels use
the {-1, 0, 1} convention (-1 = uncertain/missing mention).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
from PIL import Image
from sklearn.datasets import load_digits as _load_digits
from sklearn.datasets import make_moons as _make_moons

# Affine map taking raw two-moons coordinates (x in [-1, 2], y in [-0.5, 1])
# into [0, 1]^2. Isotropic so raw distances are 4x normalized distances.
MOON_OFFSET = np.array([1.5, 1.75])
MOON_SCALE = 4.0


class DataError(ValueError):
    """Raised on malformed dataset arguments or inconsistent samples."""


@dataclass(frozen=True)
class LabeledSample:
    """One sample: image/feature tensor in [0,1], class label, optional concepts."""

    image: np.ndarray
    label: int
    id: str
    concepts: np.ndarray | None = None
    split: str | None = None

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float64)
        if not np.all(np.isfinite(img)):
            raise DataError(f"sample {self.id}: image has non-finite values")
        if img.min() < -1e-9 or img.max() > 1 + 1e-9:
            raise DataError(f"sample {self.id}: image values outside [0, 1]")
        object.__setattr__(self, "image", img)
        if self.concepts is not None:
            c = np.asarray(self.concepts, dtype=np.int64)
            if not np.all(np.isin(c, (-1, 0, 1))):
                raise DataError(f"sample {self.id}: concept labels must be in {{-1,0,1}}")
            object.__setattr__(self, "concepts", c)


@dataclass(frozen=True)
class Dataset:
    """Ordered, immutable collection of LabeledSample with a fixed class count."""

    samples: tuple[LabeledSample, ...]
    class_count: int
    concept_names: tuple[str, ...] | None = None

    def __post_init__(self):
        if len(self.samples) == 0:
            raise DataError("dataset must be non-empty")
        object.__setattr__(self, "samples", tuple(self.samples))
        shape = self.samples[0].image.shape
        kc = None if self.concept_names is None else len(self.concept_names)
        for s in self.samples:
            if s.image.shape != shape:
                raise DataError(f"sample {s.id}: image shape {s.image.shape} != {shape}")
            if s.label < 0 or s.label >= self.class_count:
                raise DataError(f"sample {s.id}: label {s.label} outside 0..{self.class_count - 1}")
            if kc is not None and s.concepts is not None and len(s.concepts) != kc:
                raise DataError(f"sample {s.id}: expected {kc} concept labels")
        seen = {s.label for s in self.samples}
        if seen and (min(seen) != 0 or max(seen) != len(seen) - 1):
            raise DataError(f"class indices {sorted(seen)} are not contiguous from 0")

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[LabeledSample]:
        return iter(self.samples)

    def __getitem__(self, i: int) -> LabeledSample:
        return self.samples[i]

    @property
    def image_shape(self) -> tuple[int, ...]:
        return self.samples[0].image.shape

    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.samples])

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def concept_matrix(self) -> np.ndarray:
        if any(s.concepts is None for s in self.samples):
            raise DataError("dataset has samples without concept labels")
        return np.stack([s.concepts for s in self.samples])

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset(tuple(self.samples[i] for i in indices), self.class_count, self.concept_names)

    def filter_split(self, split: str) -> "Dataset":
        keep = tuple(s for s in self.samples if s.split == split)
        if not keep:
            raise DataError(f"no samples tagged with split {split!r}")
        return Dataset(keep, self.class_count, self.concept_names)


@dataclass(frozen=True)
class PatchBag:
    """Variable-length set of same-shaped patches with a multi-outcome target."""

    subject_id: str
    patches: np.ndarray  # (N, p, p) or (N, p, p, p)
    outcome: np.ndarray  # 1-D outcome vector

    def __post_init__(self):
        p = np.asarray(self.patches, dtype=np.float64)
        if p.ndim < 2 or p.shape[0] < 1:
            raise DataError(f"bag {self.subject_id}: needs at least one patch")
        object.__setattr__(self, "patches", p)
        object.__setattr__(self, "outcome", np.atleast_1d(np.asarray(self.outcome, dtype=np.float64)))

    def __len__(self) -> int:
        return self.patches.shape[0]


def make_two_moons(n: int, noise: float, seed: int) -> Dataset:
    """Two interleaved half-circles, rescaled into [0,1]^2.

    Raw geometry is the conventional one (unit radius, second moon offset by
    (1, 0.5)); raw coordinates map through (p + MOON_OFFSET) / MOON_SCALE and
    are clipped to [0, 1]. Byte-identical for a fixed seed.
    """
    if n < 2:
        raise DataError(f"need n >= 2 samples, got {n}")
    if noise < 0:
        raise DataError(f"noise must be >= 0, got {noise}")
    xy, labels = _make_moons(n_samples=n, noise=noise or None, random_state=seed)
    norm = np.clip((xy + MOON_OFFSET) / MOON_SCALE, 0.0, 1.0)
    samples = tuple(
        LabeledSample(image=norm[i], label=int(labels[i]), id=f"moon-{i:05d}")
        for i in range(n)
    )
    return Dataset(samples, class_count=2)


def moons_to_raw(points: np.ndarray) -> np.ndarray:
    """Invert the two-moons normalization back to raw coordinates."""
    return np.asarray(points) * MOON_SCALE - MOON_OFFSET


def moon_curve_distance(points: np.ndarray, which: int, samples: int = 2048) -> np.ndarray:
    """Distance (in normalized units) from each point to a noiseless moon arc."""
    t = np.linspace(0.0, np.pi, samples)
    if which == 0:
        curve = np.stack([np.cos(t), np.sin(t)], axis=1)
    elif which == 1:
        curve = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
    else:
        raise DataError(f"moon index must be 0 or 1, got {which}")
    curve = (curve + MOON_OFFSET) / MOON_SCALE
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    d = np.linalg.norm(pts[:, None, :] - curve[None, :, :], axis=2)
    return d.min(axis=1)


def load_digit_images(classes: Sequence[int] | None = None) -> Dataset:
    """The bundled 8x8 handwritten-digit images, intensities scaled to [0,1].

    ``classes`` restricts to a subset of digits and relabels them contiguously
    (e.g. classes=(3, 8) gives labels {0, 1}).
    """
    raw = _load_digits()
    images = raw.images / 16.0
    labels = raw.target
    if classes is not None:
        classes = list(classes)
        keep = np.isin(labels, classes)
        images, labels = images[keep], labels[keep]
        remap = {c: i for i, c in enumerate(classes)}
        labels = np.array([remap[int(y)] for y in labels])
        k = len(classes)
    else:
        k = 10
    samples = tuple(
        LabeledSample(image=images[i][..., None], label=int(labels[i]), id=f"digit-{i:05d}")
        for i in range(len(images))
    )
    return Dataset(samples, class_count=k)


def make_shapes(n: int, image_size: int, seed: int) -> Dataset:
    """Synthetic two-class shape images: filled disks (0) vs filled squares (1).

    Both shapes vary in radius and center so the classes overlap in scale but
    differ in contour. Used as a GAN-friendly stand-in for image experiments.
    """
    if n < 2:
        raise DataError(f"need n >= 2 samples, got {n}")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:image_size, 0:image_size]
    samples = []
    for i in range(n):
        label = int(rng.integers(0, 2))
        r = rng.uniform(0.18, 0.32) * image_size
        cx = rng.uniform(0.4, 0.6) * image_size
        cy = rng.uniform(0.4, 0.6) * image_size
        if label == 0:
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= r**2
        else:
            mask = (np.abs(xx - cx) <= r) & (np.abs(yy - cy) <= r)
        img = np.where(mask, 0.9, 0.1) + rng.normal(0, 0.02, size=mask.shape)
        samples.append(
            LabeledSample(image=np.clip(img, 0, 1)[..., None], label=label, id=f"shape-{i:05d}")
        )
    return Dataset(tuple(samples), class_count=2)


def make_bags(
    base: Dataset,
    bag_size_range: tuple[int, int],
    positive_rule: Callable[[LabeledSample], bool],
    seed: int,
    n_bags: int | None = None,
) -> list[PatchBag]:
    """Group base samples into bags; outcome is 1 iff any member satisfies the rule.

    Sampling is with replacement from the base dataset so small datasets can
    still produce many bags. Deterministic under the seed.
    """
    lo, hi = bag_size_range
    if not (1 <= lo <= hi):
        raise DataError(f"invalid bag size range {bag_size_range}")
    if len(base) == 0:
        raise DataError("base dataset is empty")
    rng = np.random.default_rng(seed)
    if n_bags is None:
        n_bags = max(1, len(base) // hi)
    bags = []
    for b in range(n_bags):
        size = int(rng.integers(lo, hi + 1))
        idx = rng.integers(0, len(base), size=size)
        members = [base[int(i)] for i in idx]
        outcome = float(any(positive_rule(m) for m in members))
        patches = np.stack([m.image.squeeze() for m in members])
        bags.append(PatchBag(subject_id=f"bag-{b:05d}", patches=patches, outcome=[outcome]))
    return bags


def extract_patches(
    volume: np.ndarray,
    patch_size: int,
    overlap_fraction: float,
    max_patches: int | None = None,
    seed: int = 0,
    subject_id: str = "volume",
    outcome: Sequence[float] = (0.0,),
) -> PatchBag:
    """Sliding-window patches covering the full volume.

    Stride is floor(patch_size * (1 - overlap_fraction)); a final window is
    appended per axis when the regular grid would miss the trailing edge, so
    the union of footprints always equals the volume. If the grid exceeds
    ``max_patches`` a uniform random subset (without replacement) is kept,
    preserving raster order.
    """
    vol = np.asarray(volume, dtype=np.float64)
    if not (0 <= overlap_fraction < 1):
        raise DataError(f"overlap_fraction must be in [0, 1), got {overlap_fraction}")
    if any(patch_size > d for d in vol.shape):
        raise DataError(f"patch size {patch_size} exceeds volume shape {vol.shape}")
    stride = max(1, math.floor(patch_size * (1.0 - overlap_fraction)))

    def axis_positions(dim: int) -> list[int]:
        pos = list(range(0, dim - patch_size + 1, stride))
        if pos[-1] != dim - patch_size:
            pos.append(dim - patch_size)
        return pos

    grids = [axis_positions(d) for d in vol.shape]
    corners = np.stack([g.ravel() for g in np.meshgrid(*grids, indexing="ij")], axis=1)
    if max_patches is not None and len(corners) > max_patches:
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(len(corners), size=max_patches, replace=False))
        corners = corners[keep]
    patches = np.stack(
        [vol[tuple(slice(c, c + patch_size) for c in corner)] for corner in corners]
    )
    return PatchBag(subject_id=subject_id, patches=patches, outcome=np.asarray(outcome))


def bin_index(c: float, n_bins: int) -> int:
    """Map a value in [0,1] to one of n_bins equal bins: floor(c*N), top-clamped."""
    if not (0.0 <= c <= 1.0):
        raise DataError(f"c must be in [0, 1], got {c}")
    if n_bins < 2:
        raise DataError(f"need at least 2 bins, got {n_bins}")
    return min(int(math.floor(c * n_bins)), n_bins - 1)


def bin_center(index: int, n_bins: int) -> float:
    """Center value of a bin produced by bin_index."""
    if not (0 <= index < n_bins):
        raise DataError(f"bin index {index} outside 0..{n_bins - 1}")
    return (index + 0.5) / n_bins


def train_val_test_split(
    ds: Dataset, fractions: tuple[float, float, float] = (0.7, 0.15, 0.15), seed: int = 0
) -> tuple[Dataset, Dataset, Dataset]:
    """Deterministic shuffled split tagged train/val/test."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"split fractions must sum to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ds))
    n_train = int(round(fractions[0] * len(ds)))
    n_val = int(round(fractions[1] * len(ds)))
    parts = (order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :])
    out = []
    for name, idx in zip(("train", "val", "test"), parts):
        if len(idx) == 0:
            raise DataError(f"split {name!r} would be empty")
        sub = tuple(
            LabeledSample(s.image, s.label, s.id, s.concepts, split=name)
            for s in (ds[int(i)] for i in idx)
        )
        out.append(Dataset(sub, ds.class_count, ds.concept_names))
    return tuple(out)


# --- on-disk manifest ------------------------------------------------------

_MANIFEST_FIELDS = ["id", "image_path", "label", "concepts", "split", "inline"]


def _encode_vec(v: np.ndarray | None) -> str:
    if v is None:
        return ""
    return " ".join(repr(float(x)) for x in np.asarray(v).ravel())


def save_dataset(ds: Dataset, directory: str | Path, inline_threshold: int = 16) -> Path:
    """Write a dataset as manifest.csv plus lossless 16-bit PNG images.

    Samples whose tensors are small (<= inline_threshold values, e.g. raw
    2-D points) are stored inline in the manifest at full float precision;
    images are quantized to 16-bit PNG (precision 1/65535).
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    img_dir = directory / "images"
    with open(directory / "manifest.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=_MANIFEST_FIELDS)
        writer.writeheader()
        for s in ds:
            row = {
                "id": s.id,
                "label": s.label,
                "concepts": _encode_vec(s.concepts),
                "split": s.split or "",
                "image_path": "",
                "inline": "",
            }
            if s.image.size <= inline_threshold:
                row["inline"] = _encode_vec(s.image) + f" #shape={','.join(map(str, s.image.shape))}"
            else:
                img_dir.mkdir(exist_ok=True)
                rel = f"images/{s.id}.png"
                arr = np.round(np.squeeze(s.image) * 65535).astype(np.uint16)
                Image.fromarray(arr, mode="I;16").save(directory / rel)
                row["image_path"] = rel + f" #shape={','.join(map(str, s.image.shape))}"
            writer.writerow(row)
    meta = directory / "dataset.csv"
    with open(meta, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class_count", ds.class_count])
        w.writerow(["concept_names", "|".join(ds.concept_names or ())])
    return directory / "manifest.csv"


def _split_shape_tag(cell: str) -> tuple[str, tuple[int, ...] | None]:
    if "#shape=" not in cell:
        return cell, None
    body, tag = cell.split("#shape=")
    return body.strip(), tuple(int(x) for x in tag.split(","))


def load_dataset(directory: str | Path) -> Dataset:
    """Load a dataset previously written by save_dataset."""
    directory = Path(directory)
    with open(directory / "dataset.csv", newline="") as fh:
        rows = {r[0]: r[1] if len(r) > 1 else "" for r in csv.reader(fh)}
    class_count = int(rows["class_count"])
    concept_names = tuple(rows["concept_names"].split("|")) if rows.get("concept_names") else None
    samples = []
    with open(directory / "manifest.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            concepts = (
                np.array([int(float(x)) for x in row["concepts"].split()])
                if row["concepts"]
                else None
            )
            if row["inline"]:
                body, shape = _split_shape_tag(row["inline"])
                img = np.array([float(x) for x in body.split()])
                if shape:
                    img = img.reshape(shape)
            else:
                rel, shape = _split_shape_tag(row["image_path"])
                arr = np.asarray(Image.open(directory / rel), dtype=np.float64) / 65535.0
                img = arr.reshape(shape) if shape else arr
            samples.append(
                LabeledSample(
                    image=img,
                    label=int(row["label"]),
                    id=row["id"],
                    concepts=concepts,
                    split=row["split"] or None,
                )
            )
    return Dataset(tuple(samples), class_count, concept_names)
