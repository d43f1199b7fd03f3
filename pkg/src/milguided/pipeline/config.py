"""Run configuration stored as a flat ``key = value`` text file."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from ..errors import ConfigurationError, ValidationError
from ..patches import PatchSpec


@dataclass
class Config:
    # data
    image_size: int = 96
    in_channels: int = 1
    n_train: int = 2000
    n_test: int = 500
    positive_fraction: float = 0.5
    blobs_min: int = 1
    blobs_max: int = 5
    radius_min: float = 1.0
    radius_max: float = 2.0
    contrast: float = 0.08
    noise_mode: str = "blur"
    noise_probability: float = 0.3
    # patches
    m: int = 5
    patch_size: int = 32
    suppression_window: int = 32
    # model and optimisation
    channels: tuple[int, ...] = (8, 16, 16)
    c: float = 10.0
    dropout: float = 0.0
    learning_rate: float = 0.05
    epochs: int = 13
    instance_epochs: int = 6
    batch_size: int = 16
    grad_clip: float = 1.0
    finetune_instance: bool = False
    train_clean_only: bool = False
    saliency: str = "two_wam"
    # evaluation
    threshold: float = 0.5
    bbox_fraction: float = 0.5
    # run
    seed: int = 0
    data_dir: str = "data"
    out_dir: str = "runs"

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.validate()

    @property
    def k(self) -> int:
        return self.channels[-1]

    @property
    def patch_spec(self) -> PatchSpec:
        return PatchSpec(self.m, self.patch_size, self.suppression_window)

    def validate(self) -> None:
        positives = ["image_size", "in_channels", "m", "patch_size", "suppression_window",
                     "learning_rate", "epochs", "instance_epochs", "batch_size", "c"]
        for name in positives:
            if not getattr(self, name) > 0:
                raise ValidationError(f"config: {name} must be positive, got {getattr(self, name)}")
        if self.n_train < 0 or self.n_test < 0:
            raise ValidationError("config: split sizes must be non-negative")
        if len(self.channels) != 3 or min(self.channels) < 1:
            raise ValidationError(f"config: channels must be three positive ints, got {self.channels}")
        if self.patch_size > self.image_size:
            raise ValidationError(f"config: patch_size {self.patch_size} > image_size {self.image_size}")
        if self.grad_clip < 0:
            raise ValidationError(f"config: grad_clip must be >= 0 (0 disables), got {self.grad_clip}")
        if not 0 <= self.dropout < 1:
            raise ValidationError(f"config: dropout must lie in [0, 1), got {self.dropout}")
        if not 0 < self.positive_fraction < 1:
            raise ValidationError("config: positive_fraction must lie in (0, 1)")
        if not 1 <= self.blobs_min <= self.blobs_max:
            raise ValidationError("config: need 1 <= blobs_min <= blobs_max")
        if not 1 <= self.radius_min <= self.radius_max:
            raise ValidationError("config: need 1 <= radius_min <= radius_max")
        if self.noise_mode not in ("none", "blur", "brightness"):
            raise ValidationError(f"config: unknown noise_mode {self.noise_mode!r}")
        if not 0 <= self.noise_probability <= 1:
            raise ValidationError("config: noise_probability must lie in [0, 1]")
        if self.saliency not in ("two_wam", "grad_cam"):
            raise ValidationError(f"config: unknown saliency {self.saliency!r}")
        if not 0 < self.threshold < 1 or not 0 < self.bbox_fraction < 1:
            raise ValidationError("config: threshold and bbox_fraction must lie in (0, 1)")
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise ValidationError("config: seed must be an unsigned 64-bit integer")

    def replace(self, **changes) -> Config:
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())


def _coerce(name: str, raw: str, default):
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
        return raw
    except ValueError as exc:
        raise ConfigurationError(f"config: bad value for {name}: {raw!r}") from exc


def parse_config(text: str, base: Config | None = None) -> Config:
    base = base or Config()
    known = {f.name: getattr(base, f.name) for f in fields(base)}
    changes = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"config line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ConfigurationError(f"config line {lineno}: unknown key {key!r}")
        changes[key] = _coerce(key, raw, known[key])
    return dataclasses.replace(base, **changes)


def load_config(path: str | Path) -> Config:
    return parse_config(Path(path).read_text())
