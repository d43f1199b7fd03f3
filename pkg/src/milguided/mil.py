"""Bags, instances, rank-weighted bag scoring and binary metrics."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ValidationError


@dataclass
class Bag:
    image: np.ndarray
    label: int
    id: str

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValidationError(f"bag {self.id}: label must be 0 or 1, got {self.label}")
        if not np.isfinite(self.image).all():
            raise ValidationError(f"bag {self.id}: image contains non-finite values")


@dataclass
class Dataset:
    bags: list[Bag]
    split: str = "train"

    def __post_init__(self):
        if self.split not in ("train", "validation", "test"):
            raise ValidationError(f"unknown split {self.split!r}")
        ids = [b.id for b in self.bags]
        if len(set(ids)) != len(ids):
            raise ValidationError("bag ids must be unique")

    def __len__(self) -> int:
        return len(self.bags)

    def __iter__(self):
        return iter(self.bags)

    @property
    def labels(self) -> np.ndarray:
        return np.array([b.label for b in self.bags], dtype=int)


def inherit_labels(bag: Bag, instances: Sequence) -> list:
    """Copies of ``instances`` carrying the bag's label."""
    foreign = [inst.bag_id for inst in instances if inst.bag_id != bag.id]
    if foreign:
        raise ValidationError(f"instances from bags {sorted(set(foreign))} do not belong to bag {bag.id}")
    return [replace(inst, label=bag.label) for inst in instances]


def rank_weights(m: int) -> np.ndarray:
    return np.arange(m, 0, -1, dtype=np.float64)


def weighted_evaluation(p: Sequence[float]) -> float:
    """Bag probability from instance probabilities listed in saliency-rank order.

    Rank j of m gets weight m - j + 1, so the most salient patch counts most.
    """
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    if p.size == 0:
        raise ValidationError("weighted_evaluation needs at least one probability")
    if np.any(p < 0) or np.any(p > 1) or not np.isfinite(p).all():
        raise ValidationError("probabilities must lie in [0, 1]")
    w = rank_weights(p.size)
    # weighting the excess over the minimum keeps a constant input exact
    low = p.min()
    return float(low + np.dot(w, p - low) / w.sum())


def compute_metrics(predictions: Sequence[tuple[float, int]], threshold: float = 0.5) -> tuple[float, float]:
    """(accuracy, positive-class F1); F1 is 0 when precision + recall is 0."""
    if len(predictions) == 0:
        raise ValidationError("compute_metrics needs at least one prediction")
    if not 0 < threshold < 1:
        raise ValidationError(f"threshold must lie in (0, 1), got {threshold}")
    probs = np.array([p for p, _ in predictions], dtype=np.float64)
    labels = np.array([y for _, y in predictions], dtype=int)
    pred = (probs >= threshold).astype(int)
    tp = int(np.sum((pred == 1) & (labels == 1)))
    fp = int(np.sum((pred == 1) & (labels == 0)))
    fn = int(np.sum((pred == 0) & (labels == 1)))
    accuracy = float(np.mean(pred == labels))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return accuracy, f1


@dataclass
class PredictionReport:
    bag_ids: list[str]
    probabilities: list[float]
    labels: list[int]
    threshold: float = 0.5
    accuracy: float = field(init=False)
    f1: float = field(init=False)

    def __post_init__(self):
        self.accuracy, self.f1 = compute_metrics(list(zip(self.probabilities, self.labels)), self.threshold)

    @property
    def predicted(self) -> list[int]:
        return [int(p >= self.threshold) for p in self.probabilities]

    def summary(self) -> str:
        return f"accuracy={self.accuracy:.6f},f1={self.f1:.6f}"

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bag_id", "P", "pred", "label"])
            for bag_id, p, pred, y in zip(self.bag_ids, self.probabilities, self.predicted, self.labels):
                writer.writerow([bag_id, repr(float(p)), pred, y])
