"""One bounding box per image from a saliency map, scored by IoU."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import ValidationError
from .saliency import SaliencyMap


@dataclass(frozen=True)
class BBox:
    """Half-open pixel box ``[row0, row1) x [col0, col1)``."""

    row0: int
    col0: int
    row1: int
    col1: int
    degenerate: bool = False

    def __post_init__(self):
        if not (self.row0 < self.row1 and self.col0 < self.col1):
            raise ValidationError(f"empty box {self.as_tuple()}")
        if self.row0 < 0 or self.col0 < 0:
            raise ValidationError(f"box {self.as_tuple()} has negative coordinates")

    @property
    def area(self) -> int:
        return (self.row1 - self.row0) * (self.col1 - self.col0)

    @property
    def height(self) -> int:
        return self.row1 - self.row0

    @property
    def width(self) -> int:
        return self.col1 - self.col0

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.row0, self.col0, self.row1, self.col1)

    def contains(self, row: int, col: int) -> bool:
        return self.row0 <= row < self.row1 and self.col0 <= col < self.col1


def saliency_to_bbox(smap: SaliencyMap | np.ndarray, threshold_fraction: float = 0.5) -> BBox:
    """Tight box around the chosen component of ``map >= fraction * max``.

    Components are 4-connected.  Only components reaching the global maximum
    are candidates; among those the largest wins, ties to the smallest
    (row0, col0).  A constant map yields the full image, flagged degenerate.
    """
    if not 0 < threshold_fraction < 1:
        raise ValidationError(f"threshold_fraction must lie in (0, 1), got {threshold_fraction}")
    values = smap.values if isinstance(smap, SaliencyMap) else np.asarray(smap, dtype=np.float64)
    h, w = values.shape
    peak = values.max()
    if peak == values.min():
        return BBox(0, 0, h, w, degenerate=True)

    mask = values >= threshold_fraction * peak
    labels, count = ndimage.label(mask)
    slices = ndimage.find_objects(labels)
    peak_labels = set(np.unique(labels[values == peak]).tolist()) - {0}
    best = None
    for index in sorted(peak_labels):
        sl = slices[index - 1]
        area = int(np.sum(labels[sl] == index))
        key = (-area, sl[0].start, sl[1].start)
        if best is None or key < best[0]:
            best = (key, sl)
    sl = best[1]
    return BBox(sl[0].start, sl[1].start, sl[0].stop, sl[1].stop)


def iou(a: BBox, b: BBox) -> float:
    ih = min(a.row1, b.row1) - max(a.row0, b.row0)
    iw = min(a.col1, b.col1) - max(a.col0, b.col0)
    inter = max(ih, 0) * max(iw, 0)
    union = a.area + b.area - inter
    return inter / union if union else 0.0


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU of every row of ``a`` against every row of ``b``; rows are (row0, col0, row1, col1)."""
    a = np.asarray(a, dtype=np.int64).reshape(-1, 4)[:, None, :]
    b = np.asarray(b, dtype=np.int64).reshape(-1, 4)[None, :, :]
    ih = np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0])
    iw = np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1])
    inter = np.maximum(ih, 0) * np.maximum(iw, 0)
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    return np.divide(inter, union, out=np.zeros(inter.shape), where=union > 0)


def best_iou(pred: BBox, truths: Sequence[BBox]) -> float:
    return max((iou(pred, t) for t in truths), default=0.0)


def random_hit_probability(box_size: tuple[int, int], truths: Sequence[BBox],
                           image_size: tuple[int, int]) -> float:
    """Chance that a box of ``box_size`` placed uniformly at random overlaps a truth box.

    Counts the top-left placements (out of all that keep the box inside the
    image) whose box intersects at least one ground-truth box.
    """
    bh, bw = box_size
    h, w = image_size
    if not truths:
        return 0.0
    rows, cols = h - bh + 1, w - bw + 1
    hit = np.zeros((rows, cols), dtype=bool)
    for t in truths:
        # top-left r overlaps iff r < t.row1 and r + bh > t.row0
        r_lo, r_hi = max(t.row0 - bh + 1, 0), min(t.row1 - 1, rows - 1)
        c_lo, c_hi = max(t.col0 - bw + 1, 0), min(t.col1 - 1, cols - 1)
        if r_lo <= r_hi and c_lo <= c_hi:
            hit[r_lo:r_hi + 1, c_lo:c_hi + 1] = True
    return float(hit.mean())


def draw_box(rgb: np.ndarray, box: BBox, color: tuple[int, int, int]) -> np.ndarray:
    """Copy of an ``H x W x 3`` uint8 image with a 1-pixel outline of ``box``."""
    out = np.array(rgb, dtype=np.uint8, copy=True)
    r0, c0 = box.row0, box.col0
    r1, c1 = box.row1 - 1, box.col1 - 1
    out[r0, c0:c1 + 1] = color
    out[r1, c0:c1 + 1] = color
    out[r0:r1 + 1, c0] = color
    out[r0:r1 + 1, c1] = color
    return out
