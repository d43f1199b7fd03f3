"""End-to-end runs: generate -> Bag Model -> patches -> Instance Model -> evaluate."""
from __future__ import annotations

import logging
import time
from pathlib import Path

import numpy as np

from ..mil import Dataset
from .config import Config
from .evaluate import RunReport, evaluate
from .model import Checkpoint
from .synthetic import LoadedSplit, SyntheticSpec, gen_synthetic, load_split
from .train import extract_patches, train_bag, train_instance

log = logging.getLogger(__name__)


def ensure_data(config: Config, data_dir: str | Path) -> Path:
    data_dir = Path(data_dir)
    if not (data_dir / "train" / "labels.csv").exists():
        gen_synthetic(SyntheticSpec.from_config(config), data_dir)
    return data_dir


def clean_subset(split: LoadedSplit) -> Dataset:
    """Training bags without injected noise."""
    return Dataset([b for b in split.dataset.bags if not split.noisy.get(b.id, False)],
                   split.dataset.split)


def run_pipeline(config: Config, workdir: str | Path, data_dir: str | Path | None = None) -> RunReport:
    """Run all four stages; checkpoints, patches and report land in ``workdir``."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    config.save(workdir / "config.txt")
    timings: dict[str, float] = {}

    t0 = time.perf_counter()
    data = ensure_data(config, data_dir if data_dir is not None else workdir / "data")
    train, test = load_split(data / "train"), load_split(data / "test")
    timings["data"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    bag_data = clean_subset(train) if config.train_clean_only else train.dataset
    bag_ckpt = train_bag(config, bag_data)
    bag_ckpt.save(workdir / "bag.ckpt")
    timings["train_bag"] = time.perf_counter() - t0
    log.info("bag model trained in %.1fs", timings["train_bag"])

    t0 = time.perf_counter()
    instances = extract_patches(bag_ckpt, train.dataset, config, workdir / "patches")
    timings["patches"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    inst_ckpt = train_instance(config, instances, bag_ckpt)
    inst_ckpt.save(workdir / "instance.ckpt")
    timings["train_instance"] = time.perf_counter() - t0
    log.info("instance model trained in %.1fs", timings["train_instance"])

    t0 = time.perf_counter()
    report = evaluate(bag_ckpt, inst_ckpt, test, config)
    timings["evaluate"] = time.perf_counter() - t0
    report.timings = timings
    report.write(workdir / "report")
    return report


def noise_ablation(config: Config, workdir: str | Path, data_dir: str | Path | None = None) -> dict[str, float]:
    """Bag Model test accuracy when trained on all images vs only the noise-free ones."""
    workdir = Path(workdir)
    data = ensure_data(config, data_dir if data_dir is not None else workdir / "data")
    train, test = load_split(data / "train"), load_split(data / "test")
    images = np.stack([b.image for b in test.dataset.bags])
    result = {}
    for name, subset in (("all", train.dataset), ("clean", clean_subset(train))):
        ckpt: Checkpoint = train_bag(config, subset)
        probs = ckpt.build_model().predict(images)
        result[name] = float(np.mean((probs >= config.threshold) == test.dataset.labels))
    return result
