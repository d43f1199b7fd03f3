"""The small Two-WAM classifier shared by the Bag and Instance models.

input stage -> conv3x3(s1)-relu -> conv3x3(s2)-relu -> conv3x3(s2)-relu -> Two-WAM fusion
-> gate features by the fused map -> global average pool -> [dropout] ->
dense -> sigmoid.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from scipy import ndimage

from ..errors import ConfigurationError
from ..tensor import (
    Tensor,
    activation,
    conv2d,
    dense,
    dropout,
    global_avg_pool,
    glorot_uniform,
    no_grad,
)
from ..two_wam import ActivationMap, TwoWamLayer, two_wam_forward, two_wam_mask

CHECKPOINT_FORMAT = "milguided-checkpoint"
CHECKPOINT_VERSION = 1
_STRIDES = (1, 2, 2)
# fixed input stage. Each image channel becomes its local contrast (box mean
# removed, strongly rescaled) plus its globally standardised value. The first
# term makes small bright spots dominate the first activations instead of the
# smooth background, so the quadratic gating does not starve the gradient; the
# second keeps overall brightness visible at a fraction of the spot response.
INPUT_WINDOW, INPUT_SCALE = 5, 0.005
INPUT_MEAN, INPUT_STD = 0.4, 0.15


def local_contrast(x: np.ndarray, window: int = INPUT_WINDOW, scale: float = INPUT_SCALE) -> np.ndarray:
    """``(x - boxmean_window(x)) / scale`` over the last two axes, reflect padding."""
    x = np.asarray(x, dtype=np.float64)
    size = (1,) * (x.ndim - 2) + (window, window)
    return (x - ndimage.uniform_filter(x, size=size, mode="reflect")) / scale


def input_stage(x: np.ndarray, window: int = INPUT_WINDOW, scale: float = INPUT_SCALE,
                mean: float = INPUT_MEAN, std: float = INPUT_STD) -> np.ndarray:
    """Local contrast plus the globally standardised image, channel by channel."""
    x = np.asarray(x, dtype=np.float64)
    return local_contrast(x, window, scale) + (x - mean) / std


class TinyCNN:
    def __init__(self, in_channels: int = 1, channels=(8, 16, 16), c: float = 10.0,
                 dropout_rate: float = 0.0, rng: np.random.Generator | None = None,
                 input_window: int = INPUT_WINDOW, input_scale: float = INPUT_SCALE,
                 input_mean: float = INPUT_MEAN, input_std: float = INPUT_STD):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels = in_channels
        self.input_window = input_window
        self.input_scale = input_scale
        self.input_mean = input_mean
        self.input_std = input_std
        self.channels = tuple(channels)
        self.dropout_rate = dropout_rate
        self.convs: list[tuple[Tensor, Tensor]] = []
        c_in = in_channels
        for c_out in self.channels:
            w = glorot_uniform((c_out, c_in, 3, 3), c_in * 9, c_out * 9, rng)
            self.convs.append((w, Tensor(np.zeros(c_out), requires_grad=True)))
            c_in = c_out
        self.two_wam = TwoWamLayer(self.channels[-1], c)
        self.fc_w = glorot_uniform((1, c_in), c_in, 1, rng)
        self.fc_b = Tensor(np.zeros(1), requires_grad=True)

    # -- structure -----------------------------------------------------------
    def architecture(self) -> dict:
        return {"name": "tiny_cnn_two_wam", "in_channels": self.in_channels,
                "channels": list(self.channels), "kernel": 3, "strides": list(_STRIDES),
                "c": self.two_wam.c, "dropout": self.dropout_rate,
                "input_window": self.input_window, "input_scale": self.input_scale,
                "input_mean": self.input_mean, "input_std": self.input_std}

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        named = []
        for i, (w, b) in enumerate(self.convs, start=1):
            named += [(f"conv{i}.weight", w), (f"conv{i}.bias", b)]
        named += [("two_wam.alpha", self.two_wam.alpha), ("two_wam.beta", self.two_wam.beta),
                  ("fc.weight", self.fc_w), ("fc.bias", self.fc_b)]
        return named

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    # -- forward ---------------------------------------------------------------
    def feature_maps(self, x) -> Tensor:
        # the input stage is constant, so gradients stop at its output
        x = x.data if isinstance(x, Tensor) else x
        if np.ndim(x) not in (3, 4) or np.shape(x)[np.ndim(x) - 3] != self.in_channels:
            raise ConfigurationError(
                f"input of shape {np.shape(x)} does not have {self.in_channels} channel(s)")
        h = Tensor(input_stage(x, self.input_window, self.input_scale, self.input_mean, self.input_std))
        for (w, b), stride in zip(self.convs, _STRIDES):
            h = activation(conv2d(h, w, b, stride=stride, padding=1), "relu")
        return h

    def head(self, features, training: bool = False, rng=None) -> Tensor:
        """Logit(s) from the last feature maps."""
        t_act = two_wam_forward(features, self.two_wam)
        pooled = global_avg_pool(two_wam_mask(features, t_act))
        pooled = dropout(pooled, self.dropout_rate, training, rng)
        logit = dense(pooled, self.fc_w, self.fc_b)
        return logit.reshape(logit.shape[:-1] if logit.ndim > 1 else ())

    def __call__(self, x, training: bool = False, rng=None) -> Tensor:
        return activation(self.head(self.feature_maps(x), training, rng), "sigmoid")

    def predict(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Probabilities for an ``n x c x h x w`` array."""
        out = []
        with no_grad():
            for start in range(0, len(images), batch_size):
                out.append(self(Tensor(images[start:start + batch_size])).data.reshape(-1))
        return np.concatenate(out) if out else np.zeros(0)

    def activation_maps(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Two-WAM maps (``n x h x w``) for a batch of images."""
        out = []
        with no_grad():
            for start in range(0, len(images), batch_size):
                f = self.feature_maps(Tensor(images[start:start + batch_size]))
                out.append(two_wam_forward(f, self.two_wam).data)
        return np.concatenate(out)

    def activation_map(self, image: np.ndarray) -> ActivationMap:
        return ActivationMap(self.activation_maps(image[None])[0], "two_wam")

    # -- weights -----------------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            if name not in state:
                raise ConfigurationError(f"missing weight {name!r}")
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ConfigurationError(f"weight {name!r}: shape {value.shape} != {p.shape}")
            p.data = value.copy()
            p.grad = None

    @classmethod
    def from_architecture(cls, arch: dict) -> TinyCNN:
        if arch.get("name") != "tiny_cnn_two_wam":
            raise ConfigurationError(f"unknown architecture {arch.get('name')!r}")
        return cls(arch["in_channels"], tuple(arch["channels"]), arch["c"], arch["dropout"],
                   input_window=arch["input_window"], input_scale=arch["input_scale"],
                   input_mean=arch["input_mean"], input_std=arch["input_std"])


class Checkpoint:
    """Versioned weights + architecture + training metadata.

    Serialised as JSON text with every float written via ``float.hex`` so a
    save/load/save round trip is bit-exact.
    """

    def __init__(self, architecture: dict, weights: dict[str, np.ndarray], metadata: dict | None = None):
        self.architecture = dict(architecture)
        self.weights = {k: np.asarray(v, dtype=np.float64) for k, v in weights.items()}
        self.metadata = dict(metadata or {})

    @classmethod
    def from_model(cls, model: TinyCNN, metadata: dict | None = None) -> Checkpoint:
        return cls(model.architecture(), model.state_dict(), metadata)

    def build_model(self) -> TinyCNN:
        model = TinyCNN.from_architecture(self.architecture)
        model.load_state_dict(self.weights)
        return model

    def to_json(self) -> str:
        payload = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "architecture": _hexify(self.architecture),
            "weights": {name: {"shape": list(v.shape), "data": [float(x).hex() for x in v.reshape(-1)]}
                        for name, v in self.weights.items()},
            "metadata": _hexify(self.metadata),
        }
        return json.dumps(payload, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> Checkpoint:
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"checkpoint is not valid JSON: {exc}") from exc
        if payload.get("format") != CHECKPOINT_FORMAT:
            raise ConfigurationError("not a milguided checkpoint")
        if payload.get("version") != CHECKPOINT_VERSION:
            raise ConfigurationError(
                f"checkpoint version {payload.get('version')} != supported {CHECKPOINT_VERSION}")
        weights = {name: np.array([float.fromhex(x) for x in entry["data"]]).reshape(entry["shape"])
                   for name, entry in payload["weights"].items()}
        return cls(_unhexify(payload["architecture"]), weights, _unhexify(payload["metadata"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> Checkpoint:
        return cls.from_json(Path(path).read_text())


def _hexify(obj):
    if isinstance(obj, bool) or obj is None or isinstance(obj, (int, str)):
        return obj
    if isinstance(obj, float):
        return {"hex": obj.hex()}
    if isinstance(obj, dict):
        return {k: _hexify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_hexify(v) for v in obj]
    if isinstance(obj, np.generic):
        return _hexify(obj.item())
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _unhexify(obj):
    if isinstance(obj, dict):
        if set(obj) == {"hex"}:
            return float.fromhex(obj["hex"])
        return {k: _unhexify(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_unhexify(v) for v in obj]
    return obj
