"""Two-weighted activation mapping.

k feature maps are fused into one activation map as a weighted mean in which
map ``j`` carries weight ``alpha[j] * c**beta[j]``:

    T = sum_j alpha_j c^beta_j f_j / sum_j alpha_j c^beta_j

The fused map then gates every feature channel by elementwise product.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ValidationError
from .tensor import Tensor, as_tensor, make_node, mul

DENOMINATOR_GUARD = 1e-8
DEFAULT_C = 10.0


@dataclass
class ActivationMap:
    """An ``h x w`` map produced by some model layer."""

    values: np.ndarray
    source: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DimensionError(f"activation map must be h x w, got shape {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise ValidationError("activation map contains non-finite values")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


class TwoWamLayer:
    """Learned linear weights ``alpha`` and exponent weights ``beta`` for k maps.

    Starts as a plain mean of the maps (alpha = 1, beta = 0).
    """

    def __init__(self, k: int, c: float = DEFAULT_C, alpha=None, beta=None):
        if k < 1:
            raise ValidationError(f"k must be >= 1, got {k}")
        if not c > 0:
            raise ValidationError(f"c must be > 0, got {c}")
        self.k = k
        self.c = float(c)
        self.alpha = Tensor(np.ones(k) if alpha is None else alpha, requires_grad=True)
        self.beta = Tensor(np.zeros(k) if beta is None else beta, requires_grad=True)
        if self.alpha.shape != (k,) or self.beta.shape != (k,):
            raise DimensionError(
                f"alpha/beta must have shape ({k},), got {self.alpha.shape} and {self.beta.shape}")

    def parameters(self) -> list[Tensor]:
        return [self.alpha, self.beta]

    def weights(self) -> np.ndarray:
        """Effective per-map weights ``alpha * c**beta``."""
        return self.alpha.data * self.c ** self.beta.data

    def denominator(self) -> float:
        return guard_denominator(float(self.weights().sum()))

    def __call__(self, features) -> Tensor:
        return two_wam_forward(features, self)


def guard_denominator(d: float) -> float:
    """Replace a near-zero denominator by ``sign(d) * guard`` (sign(0) = +1)."""
    if abs(d) < DENOMINATOR_GUARD:
        return DENOMINATOR_GUARD if d >= 0 else -DENOMINATOR_GUARD
    return d


def two_wam_forward(features, layer: TwoWamLayer) -> Tensor:
    """Fuse ``k x h x w`` (or ``n x k x h x w``) features into ``h x w`` maps.

    Differentiable w.r.t. the features, ``alpha`` and ``beta``; the
    denominator is differentiated through (full quotient rule).
    """
    f = as_tensor(features)
    if f.ndim not in (3, 4):
        raise DimensionError(f"two_wam: features must be k x h x w (optionally batched), got {f.shape}")
    k_axis = f.ndim - 3
    if f.shape[k_axis] != layer.k:
        raise DimensionError(
            f"two_wam: feature axis {k_axis} has {f.shape[k_axis]} maps, layer expects {layer.k}")
    alpha, beta, c = layer.alpha, layer.beta, layer.c

    scale = c ** beta.data
    weights = alpha.data * scale
    d = guard_denominator(float(weights.sum()))
    t = np.tensordot(f.data, weights, axes=([k_axis], [0])) / d

    def _bw(g):
        # g has the shape of t; broadcast it back over the map axis
        gk = np.expand_dims(g, k_axis)
        grad_f = gk * (weights / d).reshape(-1, 1, 1)
        spread = f.data - np.expand_dims(t, k_axis)
        reduce_axes = tuple(i for i in range(f.ndim) if i != k_axis)
        s = (gk * spread).sum(axis=reduce_axes)
        grad_alpha = scale * s / d
        grad_beta = np.log(c) * alpha.data * scale * s / d
        return grad_f, grad_alpha, grad_beta

    return make_node(t, (f, alpha, beta), _bw, "two_wam")


def two_wam_numerator(features, layer: TwoWamLayer) -> np.ndarray:
    """The un-normalised fusion ``sum_j alpha_j c^beta_j f_j``."""
    f = as_tensor(features).data
    return np.tensordot(f, layer.weights(), axes=([f.ndim - 3], [0]))


def two_wam_mask(features, t_act) -> Tensor:
    """Gate every feature channel by the activation map (elementwise)."""
    f = as_tensor(features)
    if isinstance(t_act, ActivationMap):
        t_act = Tensor(t_act.values)
    t = as_tensor(t_act)
    if f.ndim not in (3, 4) or t.ndim != f.ndim - 1:
        raise DimensionError(f"two_wam_mask: incompatible ranks {f.shape} and {t.shape}")
    if f.shape[-2:] != t.shape[-2:] or (f.ndim == 4 and f.shape[0] != t.shape[0]):
        raise DimensionError(
            f"two_wam_mask: spatial axes differ, features {f.shape} vs map {t.shape}")
    return mul(f, t.reshape(t.shape[:-2] + (1,) + t.shape[-2:]))


def activation_map(features, layer: TwoWamLayer, source: str = "two_wam") -> ActivationMap:
    """Inference-side helper: the fused map of one sample as an ActivationMap."""
    return ActivationMap(two_wam_forward(features, layer).data, source)


_RGB_DENOMINATOR = 255 * (1 + 256 + 256 ** 2)


def rgb_fuse(pixels) -> np.ndarray | float:
    """Encode 8-bit RGB triples into one value in [0, 1].

    ``(R + 256 G + 65536 B) / (255 * 65793)``; distinct triples map to
    distinct values.
    """
    arr = np.asarray(pixels)
    if arr.shape[-1:] != (3,):
        raise DimensionError(f"rgb_fuse: trailing axis must have 3 channels, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.mod(arr, 1) == 0):
            raise ValidationError("rgb_fuse: channel values must be integers")
        arr = arr.astype(np.int64)
    if arr.min() < 0 or arr.max() > 255:
        raise ValidationError("rgb_fuse: channel values must lie in [0, 255]")
    arr = arr.astype(np.int64)
    code = arr[..., 0] + 256 * arr[..., 1] + 65536 * arr[..., 2]
    out = code / _RGB_DENOMINATOR
    return float(out) if out.ndim == 0 else out
