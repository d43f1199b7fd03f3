"""Synthetic tiny-ROI images and the on-disk dataset format.

A dataset split lives in one directory::

    images/*.png     8-bit grayscale (or RGB)
    labels.csv       filename,label
    boxes.csv        filename,row0,col0,row1,col1   (one row per blob)
    manifest.csv     filename,label,noisy,n_blobs   (generator bookkeeping)

Backgrounds are smooth value noise in [0.2, 0.6].  Positive images carry
1-5 small Gaussian bumps; negatives carry none.  A fraction of images is
degraded by a 3x3 box blur or a uniform brightness shift.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from ..errors import ValidationError
from ..localization import BBox
from ..mil import Bag, Dataset
from ..patches import from_uint8, to_uint8
from ..saliency import bilinear_resize
from .config import Config

BACKGROUND_LOW, BACKGROUND_HIGH = 0.2, 0.6
BACKGROUND_GRID = 6
BRIGHTNESS_SHIFT = 0.2


@dataclass(frozen=True)
class SyntheticSpec:
    counts: tuple[tuple[str, int], ...] = (("train", 2000), ("test", 500))
    image_size: int = 96
    positive_fraction: float = 0.5
    blobs: tuple[int, int] = (1, 5)
    radius: tuple[float, float] = (1.0, 2.0)
    contrast: float = 0.08
    noise_mode: str = "blur"
    noise_probability: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.positive_fraction < 1:
            raise ValidationError("positive_fraction must lie in (0, 1)")
        if self.radius[0] < 1 or self.radius[0] > self.radius[1]:
            raise ValidationError(f"bad radius range {self.radius}")
        if self.blobs[0] < 1 or self.blobs[0] > self.blobs[1]:
            raise ValidationError(f"bad blob count range {self.blobs}")
        if self.noise_mode not in ("none", "blur", "brightness"):
            raise ValidationError(f"unknown noise mode {self.noise_mode!r}")

    @classmethod
    def from_config(cls, config: Config) -> SyntheticSpec:
        return cls(counts=(("train", config.n_train), ("test", config.n_test)),
                   image_size=config.image_size, positive_fraction=config.positive_fraction,
                   blobs=(config.blobs_min, config.blobs_max),
                   radius=(config.radius_min, config.radius_max), contrast=config.contrast,
                   noise_mode=config.noise_mode, noise_probability=config.noise_probability,
                   seed=config.seed)


@dataclass
class SyntheticImage:
    pixels: np.ndarray
    label: int
    boxes: list[BBox]
    noisy: bool


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    grid = rng.uniform(BACKGROUND_LOW, BACKGROUND_HIGH, size=(BACKGROUND_GRID, BACKGROUND_GRID))
    return bilinear_resize(grid, (size, size))


def _blob(size: int, center: tuple[float, float], radius: float) -> tuple[np.ndarray, BBox]:
    rows, cols = np.mgrid[0:size, 0:size]
    d2 = (rows - center[0]) ** 2 + (cols - center[1]) ** 2
    bump = np.exp(-d2 / (2.0 * radius ** 2))
    # the centre is continuous; rescale so the brightest pixel sits exactly
    # one contrast unit above the background
    bump /= bump.max()
    inside = np.argwhere(d2 <= radius ** 2)
    (r0, c0), (r1, c1) = inside.min(axis=0), inside.max(axis=0)
    return bump, BBox(int(r0), int(c0), int(r1) + 1, int(c1) + 1)


def synth_image(rng: np.random.Generator, spec: SyntheticSpec, label: int) -> SyntheticImage:
    """Draw one image.  The number of draws per image does not depend on the noise mode."""
    size = spec.image_size
    img = _background(rng, size)
    boxes = []
    if label == 1:
        n_blobs = int(rng.integers(spec.blobs[0], spec.blobs[1] + 1))
        margin = spec.radius[1] + 1
        for _ in range(n_blobs):
            radius = rng.uniform(*spec.radius)
            center = tuple(rng.uniform(margin, size - 1 - margin, size=2))
            bump, box = _blob(size, center, radius)
            img = img + spec.contrast * bump
            boxes.append(box)
    noisy_draw = rng.random() < spec.noise_probability
    shift = rng.uniform(-BRIGHTNESS_SHIFT, BRIGHTNESS_SHIFT)
    noisy = noisy_draw and spec.noise_mode != "none"
    if noisy and spec.noise_mode == "blur":
        img = ndimage.uniform_filter(img, size=3, mode="nearest")
    elif noisy and spec.noise_mode == "brightness":
        img = img + shift
    return SyntheticImage(np.clip(img, 0.0, 1.0)[None], label, boxes, noisy)


def gen_synthetic(spec: SyntheticSpec, out_dir: str | Path) -> dict[str, Path]:
    """Write every split of ``spec`` below ``out_dir``; returns split directories.

    All randomness comes from one PCG64 stream seeded with ``spec.seed``.
    """
    rng = np.random.default_rng(spec.seed)
    out_dir = Path(out_dir)
    written = {}
    for split, count in spec.counts:
        n_pos = int(round(count * spec.positive_fraction))
        labels = np.zeros(count, dtype=int)
        labels[:n_pos] = 1
        labels = labels[rng.permutation(count)]
        split_dir = out_dir / split
        (split_dir / "images").mkdir(parents=True, exist_ok=True)
        with open(split_dir / "labels.csv", "w", newline="") as lf, \
                open(split_dir / "boxes.csv", "w", newline="") as bf, \
                open(split_dir / "manifest.csv", "w", newline="") as mf:
            lw, bw, mw = csv.writer(lf), csv.writer(bf), csv.writer(mf)
            lw.writerow(["filename", "label"])
            bw.writerow(["filename", "row0", "col0", "row1", "col1"])
            mw.writerow(["filename", "label", "noisy", "n_blobs"])
            for i, label in enumerate(labels):
                sample = synth_image(rng, spec, int(label))
                name = f"{split}_{i:05d}.png"
                Image.fromarray(to_uint8(sample.pixels)).save(split_dir / "images" / name)
                lw.writerow([name, int(label)])
                for box in sample.boxes:
                    bw.writerow([name, box.row0, box.col0, box.row1, box.col1])
                mw.writerow([name, int(label), int(sample.noisy), len(sample.boxes)])
        written[split] = split_dir
    return written


@dataclass
class LoadedSplit:
    dataset: Dataset
    boxes: dict[str, list[BBox]]
    noisy: dict[str, bool]


def load_split(split_dir: str | Path, split: str | None = None) -> LoadedSplit:
    """Read a split directory (generic PNG + CSV loader)."""
    split_dir = Path(split_dir)
    if split is None:
        split = split_dir.name if split_dir.name in ("train", "validation", "test") else "train"
    with open(split_dir / "labels.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    bags = []
    for row in rows:
        pixels = from_uint8(np.asarray(Image.open(split_dir / "images" / row["filename"])))
        bags.append(Bag(pixels, int(row["label"]), Path(row["filename"]).stem))
    boxes: dict[str, list[BBox]] = {b.id: [] for b in bags}
    if (split_dir / "boxes.csv").exists():
        with open(split_dir / "boxes.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                boxes[Path(row["filename"]).stem].append(
                    BBox(int(row["row0"]), int(row["col0"]), int(row["row1"]), int(row["col1"])))
    noisy = {b.id: False for b in bags}
    if (split_dir / "manifest.csv").exists():
        with open(split_dir / "manifest.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                noisy[Path(row["filename"]).stem] = row["noisy"] == "1"
    return LoadedSplit(Dataset(bags, split), boxes, noisy)


def stack_images(bags) -> np.ndarray:
    return np.stack([b.image for b in bags])
