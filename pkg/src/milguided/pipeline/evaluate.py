"""Stage 4: Weighted Evaluation of bags, plus Bag Model and localisation metrics."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..localization import BBox, best_iou, random_hit_probability, saliency_to_bbox
from ..mil import PredictionReport, compute_metrics, weighted_evaluation
from ..saliency import SaliencyMap
from .config import Config
from .model import Checkpoint
from .synthetic import LoadedSplit
from .train import bag_instances, check_architecture, saliency_maps


@dataclass
class BagResult:
    bag_id: str
    label: int
    bag_p: float
    instance_p: list[float]
    we_p: float
    box: BBox
    truths: list[BBox]

    @property
    def box_iou(self) -> float:
        return best_iou(self.box, self.truths)

    @property
    def hit(self) -> bool:
        return self.box_iou > 0


@dataclass
class RunReport:
    rows: list[BagResult]
    threshold: float
    instance_accuracy: float
    instance_f1: float
    random_hit_rate: float
    timings: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self.bag = PredictionReport([r.bag_id for r in self.rows], [r.bag_p for r in self.rows],
                                    [r.label for r in self.rows], self.threshold)
        self.weighted = PredictionReport([r.bag_id for r in self.rows], [r.we_p for r in self.rows],
                                         [r.label for r in self.rows], self.threshold)
        located = [r for r in self.rows if r.truths]
        self.n_localized = len(located)
        self.hit_rate = float(np.mean([r.hit for r in located])) if located else 0.0
        self.mean_iou = float(np.mean([r.box_iou for r in located])) if located else 0.0

    def metrics(self) -> dict[str, float]:
        return {
            "bag_accuracy": self.bag.accuracy,
            "bag_f1": self.bag.f1,
            "instance_accuracy": self.instance_accuracy,
            "instance_f1": self.instance_f1,
            "weighted_accuracy": self.weighted.accuracy,
            "weighted_f1": self.weighted.f1,
            "hit_rate": self.hit_rate,
            "mean_iou": self.mean_iou,
            "random_hit_rate": self.random_hit_rate,
            "n_localized": float(self.n_localized),
        }

    def summary(self) -> str:
        return self.weighted.summary()

    def write(self, out_dir: str | Path) -> None:
        """Deterministic report files; wall-clock timings go to ``timings.csv``."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        self.weighted.write_csv(out_dir / "predictions.csv")
        self.bag.write_csv(out_dir / "bag_predictions.csv")
        with open(out_dir / "report.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "value"])
            for key, value in self.metrics().items():
                writer.writerow([key, repr(value)])
        with open(out_dir / "boxes.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bag_id", "row0", "col0", "row1", "col1", "iou_vs_truth"])
            for r in self.rows:
                writer.writerow([r.bag_id, *r.box.as_tuple(), repr(r.box_iou) if r.truths else ""])
        (out_dir / "summary.txt").write_text(self.summary() + "\n")
        with open(out_dir / "timings.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["stage", "seconds"])
            for key, value in self.timings.items():
                writer.writerow([key, f"{value:.3f}"])


def evaluate_models(bag_model, instance_model, split: LoadedSplit, config: Config,
                    maps: list[SaliencyMap] | None = None) -> RunReport:
    """Score a split with any pair of models exposing ``predict``.

    The bag model must also provide saliency (``activation_maps`` or the
    Grad-CAM hooks) unless ``maps`` is given.
    """
    bags = split.dataset.bags
    images = np.stack([b.image for b in bags])
    bag_p = bag_model.predict(images)
    if maps is None:
        maps = saliency_maps(bag_model, images, config)
    per_bag = bag_instances(bag_model, bags, config, maps)
    patches = np.stack([inst.pixels for group in per_bag for inst in group])
    inst_p = instance_model.predict(patches).reshape(len(bags), config.m)
    inst_labels = [inst.label for group in per_bag for inst in group]
    inst_acc, inst_f1 = compute_metrics(list(zip(inst_p.reshape(-1), inst_labels)), config.threshold)

    rows = []
    baseline = []
    size = images.shape[-2:]
    for bag, smap, bp, ip in zip(bags, maps, bag_p, inst_p):
        box = saliency_to_bbox(smap, config.bbox_fraction)
        truths = split.boxes.get(bag.id, [])
        if truths:
            baseline.append(random_hit_probability((box.height, box.width), truths, size))
        rows.append(BagResult(bag.id, bag.label, float(bp), [float(p) for p in ip],
                              weighted_evaluation(np.clip(ip, 0.0, 1.0)), box, truths))
    return RunReport(rows, config.threshold, inst_acc, inst_f1,
                     float(np.mean(baseline)) if baseline else 0.0)


def evaluate(bag_ckpt: Checkpoint, instance_ckpt: Checkpoint, split: LoadedSplit,
             config: Config) -> RunReport:
    check_architecture(bag_ckpt, config)
    check_architecture(instance_ckpt, config)
    return evaluate_models(bag_ckpt.build_model(), instance_ckpt.build_model(), split, config)
