"""Stage 1-3 of the pipeline: Bag Model, patch extraction, Instance Model.

Each stage seeds its own PCG64 generator from ``(seed, stage)`` so a stage
gives the same result whether it runs alone from the CLI or inside a full
pipeline run.
"""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from ..errors import ConfigurationError, ValidationError
from ..mil import Dataset
from ..patches import Instance, instances_from_map, save_instances
from ..saliency import SaliencyMap, grad_cam, to_saliency
from ..tensor import SgdState, Tensor, backward, bce_loss, sgd_step
from .config import Config
from .model import Checkpoint, TinyCNN

log = logging.getLogger(__name__)

STAGE_BAG, STAGE_INSTANCE = 1, 3


def stage_rng(seed: int, stage: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stage]))


def build_model(config: Config, rng: np.random.Generator) -> TinyCNN:
    return TinyCNN(config.in_channels, config.channels, config.c, config.dropout, rng)


def mean_loss(model: TinyCNN, images: np.ndarray, labels: np.ndarray) -> float:
    probs = model.predict(images)
    return bce_loss(Tensor(probs), labels).item()


def clip_gradients(params: list[Tensor], max_norm: float) -> float:
    """Rescale all gradients together so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping; ``max_norm <= 0`` leaves gradients alone.
    """
    norm = float(np.sqrt(sum(float(np.sum(p.grad ** 2)) for p in params)))
    if max_norm > 0 and norm > max_norm:
        for p in params:
            p.grad = p.grad * (max_norm / norm)
    return norm


def fit(model: TinyCNN, images: np.ndarray, labels: np.ndarray, config: Config,
        epochs: int, rng: np.random.Generator) -> dict:
    """Minibatch SGD on mean BCE with global-norm clipping; returns the loss log."""
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise ValidationError("training set must contain both classes")
    params = model.parameters()
    state = SgdState(config.learning_rate)
    initial = mean_loss(model, images, labels)
    epoch_losses = []
    n = len(images)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            probs = model(Tensor(images[idx]), training=True, rng=rng)
            loss = bce_loss(probs, labels[idx])
            backward(loss)
            clip_gradients(params, config.grad_clip)
            sgd_step(params, state)
            total += loss.item() * len(idx)
        epoch_losses.append(total / n)
        log.info("epoch %d/%d loss %.4f", epoch + 1, epochs, epoch_losses[-1])
    return {"initial_loss": initial, "epoch_losses": epoch_losses,
            "final_loss": mean_loss(model, images, labels), "steps": state.step_count}


def _check_input_shape(images: np.ndarray, config: Config) -> None:
    if images.ndim != 4 or images.shape[1] != config.in_channels:
        raise ConfigurationError(
            f"images of shape {images.shape} do not match in_channels={config.in_channels}")


def train_bag(config: Config, dataset: Dataset) -> Checkpoint:
    """Train the Bag Model on whole images."""
    images = np.stack([b.image for b in dataset.bags])
    _check_input_shape(images, config)
    rng = stage_rng(config.seed, STAGE_BAG)
    model = build_model(config, rng)
    history = fit(model, images, dataset.labels, config, config.epochs, rng)
    meta = {"stage": "bag", "seed": config.seed, "epochs": config.epochs,
            "n_train": len(dataset), **history}
    return Checkpoint.from_model(model, meta)


def instance_start(config: Config, bag_checkpoint: Checkpoint | None = None
                   ) -> tuple[TinyCNN, np.random.Generator]:
    """Instance Model before training, plus the generator its training continues with.

    With ``config.finetune_instance`` the weights are copied from
    ``bag_checkpoint``; otherwise they are drawn fresh from the seed.
    """
    rng = stage_rng(config.seed, STAGE_INSTANCE)
    model = build_model(config, rng)
    if config.finetune_instance:
        if bag_checkpoint is None:
            raise ConfigurationError("finetune_instance needs the Bag Model checkpoint")
        check_architecture(bag_checkpoint, config)
        model.load_state_dict(bag_checkpoint.weights)
    return model, rng


def train_instance(config: Config, instances: list[Instance],
                   bag_checkpoint: Checkpoint | None = None) -> Checkpoint:
    """Train the Instance Model on patches."""
    if not instances:
        raise ValidationError("instance dataset is empty")
    images = np.stack([inst.pixels for inst in instances])
    labels = np.array([inst.label for inst in instances])
    _check_input_shape(images, config)
    model, rng = instance_start(config, bag_checkpoint)
    history = fit(model, images, labels, config, config.instance_epochs, rng)
    meta = {"stage": "instance", "seed": config.seed, "epochs": config.instance_epochs,
            "finetuned": config.finetune_instance, "n_train": len(instances), **history}
    return Checkpoint.from_model(model, meta)


def check_architecture(checkpoint: Checkpoint, config: Config) -> None:
    arch = checkpoint.architecture
    expected = build_model(config, np.random.default_rng(0)).architecture()
    for key in ("name", "in_channels", "channels", "c"):
        if arch.get(key) != expected[key]:
            raise ConfigurationError(
                f"checkpoint {key}={arch.get(key)!r} does not match config {expected[key]!r}")


def saliency_maps(model: TinyCNN, images: np.ndarray, config: Config) -> list[SaliencyMap]:
    """Image-sized saliency maps from the Bag Model."""
    size = images.shape[-2:]
    if config.saliency == "two_wam":
        return [to_saliency(a, size) for a in model.activation_maps(images)]
    return [to_saliency(grad_cam(model, img), size) for img in images]


def bag_instances(model: TinyCNN, bags: list, config: Config,
                  maps: list[SaliencyMap] | None = None) -> list[list[Instance]]:
    """Patch-SaliMap per bag: exactly m instances each, in rank order."""
    if maps is None:
        maps = saliency_maps(model, np.stack([b.image for b in bags]), config)
    return [instances_from_map(bag, smap, config.patch_spec) for bag, smap in zip(bags, maps)]


def extract_patches(checkpoint: Checkpoint, dataset: Dataset, config: Config,
                    out_dir: str | Path | None = None) -> list[Instance]:
    """Patch-SaliMap over a dataset, bag order then rank order; optionally saved."""
    check_architecture(checkpoint, config)
    groups = bag_instances(checkpoint.build_model(), dataset.bags, config)
    instances = [inst for group in groups for inst in group]
    if out_dir is not None:
        save_instances(instances, out_dir)
    return instances
