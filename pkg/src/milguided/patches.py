"""Saliency-guided patch selection (Patch-SaliMap).

The m most salient points of a map are picked greedily; after each pick a
square around it is suppressed so the next patch lands elsewhere.  Patches
are cropped around the picks and inherit the label of their source image.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
from PIL import Image

from .errors import ValidationError
from .saliency import SaliencyMap


@dataclass(frozen=True)
class PatchSpec:
    m: int = 5
    patch_size: int = 32
    suppression_window: int | None = None

    def __post_init__(self):
        if self.m < 1:
            raise ValidationError(f"m must be >= 1, got {self.m}")
        if self.patch_size < 1:
            raise ValidationError(f"patch_size must be >= 1, got {self.patch_size}")
        if self.suppression_window is not None and self.suppression_window < 1:
            raise ValidationError(f"suppression_window must be >= 1, got {self.suppression_window}")

    @property
    def window(self) -> int:
        """Suppression window; defaults to the patch size."""
        return self.patch_size if self.suppression_window is None else self.suppression_window


@dataclass
class Instance:
    pixels: np.ndarray
    label: int
    bag_id: str
    rank: int
    center: tuple[int, int]
    score: float = 0.0


def select_points(smap: SaliencyMap | np.ndarray, spec: PatchSpec) -> list[tuple[int, int, float]]:
    """Greedy top-m points, most salient first.

    Each pick suppresses every position within ``window // 2`` rows and
    columns of it.  Ties go to the smallest row, then column.  If the map
    runs out, the first untaken positions in row-major order are returned
    with score 0.
    """
    if spec.m < 1:
        raise ValidationError(f"m must be >= 1, got {spec.m}")
    values = smap.values if isinstance(smap, SaliencyMap) else np.asarray(smap, dtype=np.float64)
    work = values.astype(np.float64, copy=True)
    h, w = work.shape
    half = spec.window // 2
    picks: list[tuple[int, int, float]] = []
    taken = np.zeros(work.shape, dtype=bool)
    for _ in range(spec.m):
        flat = int(np.argmax(work))
        if not np.isfinite(work.flat[flat]):
            break
        r, c = divmod(flat, w)
        picks.append((r, c, float(values[r, c])))
        taken[r, c] = True
        work[max(0, r - half):r + half + 1, max(0, c - half):c + half + 1] = -np.inf

    if len(picks) < spec.m:
        for flat in np.flatnonzero(~taken.reshape(-1)):
            if len(picks) == spec.m:
                break
            r, c = divmod(int(flat), w)
            picks.append((r, c, 0.0))
    return picks


def crop_bounds(shape: tuple[int, int], center: tuple[int, int], patch_size: int) -> tuple[int, int]:
    """Top-left corner of the crop, shifted inward to stay inside the image."""
    h, w = shape
    if patch_size > min(h, w):
        raise ValidationError(f"patch_size {patch_size} exceeds image side {min(h, w)}")
    r0 = min(max(center[0] - patch_size // 2, 0), h - patch_size)
    c0 = min(max(center[1] - patch_size // 2, 0), w - patch_size)
    return r0, c0


def crop_patch(image: np.ndarray, center: tuple[int, int], patch_size: int) -> np.ndarray:
    """Square ``c x s x s`` crop around ``center`` (rows ``r - s//2 .. r + ceil(s/2) - 1``)."""
    image = np.asarray(image)
    r0, c0 = crop_bounds(image.shape[-2:], center, patch_size)
    return image[..., r0:r0 + patch_size, c0:c0 + patch_size]


def build_instance_dataset(bags: Iterable, saliency_fn: Callable[[np.ndarray], SaliencyMap],
                           spec: PatchSpec) -> list[Instance]:
    """m instances per bag, in bag order then rank order."""
    instances: list[Instance] = []
    for bag in bags:
        try:
            smap = saliency_fn(bag.image)
        except Exception as exc:
            raise ValidationError(f"saliency failed for bag {bag.id}: {exc}") from exc
        instances.extend(instances_from_map(bag, smap, spec))
    return instances


def instances_from_map(bag, smap: SaliencyMap, spec: PatchSpec) -> list[Instance]:
    points = select_points(smap, spec)
    return [
        Instance(crop_patch(bag.image, (r, c), spec.patch_size), bag.label, bag.id, j, (r, c), score)
        for j, (r, c, score) in enumerate(points, start=1)
    ]


MANIFEST_FIELDS = ["instance_file", "bag_id", "label", "rank", "center_row", "center_col", "score"]


def instance_filename(inst: Instance) -> str:
    return f"{inst.bag_id}_r{inst.rank}.png"


def save_instances(instances: list[Instance], out_dir: str | Path) -> Path:
    """Write patch PNGs and ``manifest.csv``; returns the manifest path.

    Pixels are expected in [0, 1] (``c x s x s`` or ``s x s``) and stored as
    8-bit grayscale (one channel) or RGB (three channels).
    """
    out_dir = Path(out_dir)
    (out_dir / "patches").mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_FIELDS)
        for inst in instances:
            name = instance_filename(inst)
            Image.fromarray(to_uint8(inst.pixels)).save(out_dir / "patches" / name)
            writer.writerow([f"patches/{name}", inst.bag_id, inst.label, inst.rank,
                             inst.center[0], inst.center[1], repr(inst.score)])
    return manifest


def load_instances(out_dir: str | Path) -> list[Instance]:
    out_dir = Path(out_dir)
    instances = []
    with open(out_dir / "manifest.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            pixels = from_uint8(np.asarray(Image.open(out_dir / row["instance_file"])))
            instances.append(Instance(pixels, int(row["label"]), row["bag_id"], int(row["rank"]),
                                      (int(row["center_row"]), int(row["center_col"])),
                                      float(row["score"])))
    return instances


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)
    return np.floor(np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    """8-bit PNG pixels -> ``c x h x w`` floats in [0, 1]."""
    arr = np.asarray(arr, dtype=np.float64) / 255.0
    return arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)
