"""Activation maps -> normalised saliency maps -> thermal heatmaps."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from PIL import Image

from .errors import ConfigurationError, DimensionError, ValidationError
from .tensor import ComputeGraph, Tensor, as_tensor, backward, no_grad
from .two_wam import ActivationMap


@dataclass
class SaliencyMap:
    """``H x W`` values in [0, 1]; 1 marks the most interesting region."""

    values: np.ndarray
    source_size: tuple[int, int]
    image_size: tuple[int, int]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != tuple(self.image_size):
            raise DimensionError(f"saliency values {self.values.shape} != image size {self.image_size}")
        if self.values.size and (self.values.min() < 0 or self.values.max() > 1):
            raise ValidationError("saliency values must lie in [0, 1]")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def cam(features, weights, activation: str = "relu") -> ActivationMap:
    """Weighted sum of feature maps followed by ``relu`` or ``identity``."""
    f = as_tensor(features).data
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if f.ndim != 3:
        raise DimensionError(f"cam: features must be k x h x w, got {f.shape}")
    if w.size != f.shape[0]:
        raise DimensionError(f"cam: {w.size} weights for {f.shape[0]} feature maps (axis 0)")
    fused = np.tensordot(w, f, axes=1)
    if activation == "relu":
        fused = np.maximum(fused, 0.0)
    elif activation != "identity":
        raise ValidationError(f"cam: unknown activation {activation!r}")
    return ActivationMap(fused, source="cam")


def grad_cam(model, input, target: Callable[[Tensor], Tensor] | None = None) -> ActivationMap:
    """Grad-CAM at the model's last feature layer.

    ``model`` must expose ``feature_maps(x)`` (the designated layer) and
    ``head(features)`` (everything after it).  ``target`` picks the scalar
    score from the head output; by default the output itself is used.
    """
    feature_maps = getattr(model, "feature_maps", None)
    head = getattr(model, "head", None)
    if not callable(feature_maps) or not callable(head):
        raise ConfigurationError("grad_cam: model must expose feature_maps() and head()")
    with no_grad():
        f_val = feature_maps(as_tensor(input)).data
    if f_val.ndim != 3:
        raise DimensionError(f"grad_cam: expected one k x h x w feature stack, got {f_val.shape}")
    f = Tensor(f_val, requires_grad=True)
    out = head(f)
    score = target(out) if target is not None else out
    if score.size != 1:
        raise ValidationError(f"grad_cam: target score must be scalar, got shape {score.shape}")
    if score._backward is None:
        weights = np.zeros(f_val.shape[0])
    else:
        # the model is frozen: leave the gradient buffers of its weights as found
        leaves = [n for _, _, n in ComputeGraph.from_root(score).nodes
                  if n._backward is None and n.requires_grad and n is not f]
        saved = [leaf.grad for leaf in leaves]
        backward(score)
        weights = f.grad.mean(axis=(1, 2))
        for leaf, grad in zip(leaves, saved):
            leaf.grad = grad
    result = cam(f_val, weights, "relu")
    result.source = "grad_cam"
    return result


def _interp_matrix(n_src: int, n_dst: int) -> np.ndarray:
    """Linear interpolation weights, corner aligned: (n_dst, n_src)."""
    mat = np.zeros((n_dst, n_src))
    if n_src == 1:
        mat[:, 0] = 1.0
        return mat
    pos = np.arange(n_dst) * (n_src - 1) / (n_dst - 1) if n_dst > 1 else np.zeros(1)
    lo = np.minimum(np.floor(pos).astype(int), n_src - 2)
    frac = pos - lo
    rows = np.arange(n_dst)
    mat[rows, lo] = 1.0 - frac
    mat[rows, lo + 1] += frac
    return mat


def bilinear_resize(values: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = values.shape
    return _interp_matrix(h, size[0]) @ values @ _interp_matrix(w, size[1]).T


def normalize(values: np.ndarray) -> np.ndarray:
    """Min-max scale into [0, 1]; a constant map becomes all zeros."""
    lo, hi = values.min(), values.max()
    if hi - lo <= 0:
        return np.zeros_like(values)
    out = (values - lo) / (hi - lo)
    return np.clip(out, 0.0, 1.0)


def to_saliency(amap: ActivationMap | np.ndarray, target: tuple[int, int]) -> SaliencyMap:
    """Upscale an activation map to image size and min-max normalise it."""
    values = amap.values if isinstance(amap, ActivationMap) else np.asarray(amap, dtype=np.float64)
    h, w = values.shape
    big_h, big_w = int(target[0]), int(target[1])
    if big_h < h or big_w < w:
        raise ValidationError(f"to_saliency upscales only: target {target} is smaller than map {(h, w)}")
    resized = values if (big_h, big_w) == (h, w) else bilinear_resize(values, (big_h, big_w))
    return SaliencyMap(normalize(resized), (h, w), (big_h, big_w))


_BLUE = np.array([0.0, 0.0, 255.0])
_YELLOW = np.array([255.0, 255.0, 0.0])
_RED = np.array([255.0, 0.0, 0.0])


def thermal_colors(values: np.ndarray) -> np.ndarray:
    """Blue (0) -> yellow (0.5) -> red (1), 8-bit, rounded half up."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)[..., None]
    low = _BLUE + (_YELLOW - _BLUE) * (v / 0.5)
    high = _YELLOW + (_RED - _YELLOW) * ((v - 0.5) / 0.5)
    rgb = np.where(v <= 0.5, low, high)
    return np.floor(rgb + 0.5).astype(np.uint8)


def render_thermal(smap: SaliencyMap | np.ndarray, image: np.ndarray | None = None) -> np.ndarray:
    """Colour a saliency map; with ``image`` the heatmap is blended at 50%.

    ``image`` is ``H x W`` or ``H x W x 3`` in 8-bit or [0, 1] float form.
    """
    values = smap.values if isinstance(smap, SaliencyMap) else np.asarray(smap)
    heat = thermal_colors(values)
    if image is None:
        return heat
    base = np.asarray(image)
    if base.dtype != np.uint8:
        base = np.floor(np.clip(base, 0.0, 1.0) * 255.0 + 0.5)
    base = base.astype(np.float64)
    if base.ndim == 2:
        base = np.repeat(base[..., None], 3, axis=2)
    if base.shape[:2] != heat.shape[:2]:
        raise DimensionError(f"render_thermal: image {base.shape[:2]} vs map {heat.shape[:2]}")
    return np.floor(0.5 * heat + 0.5 * base + 0.5).astype(np.uint8)


def write_png(path: str | Path, rgb: np.ndarray) -> None:
    Image.fromarray(np.asarray(rgb, dtype=np.uint8)).save(path)
