"""Command line entry point: ``milguided <subcommand> [flags]``.

Exit codes: 0 success, 1 validation/usage error, 2 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from ..errors import ValidationError
from ..localization import best_iou, draw_box, saliency_to_bbox
from ..patches import load_instances
from ..saliency import render_thermal, write_png
from ..two_wam import TwoWamLayer, rgb_fuse, two_wam_forward, two_wam_numerator
from .config import Config, load_config
from .evaluate import evaluate
from .experiment import noise_ablation, run_pipeline
from .model import Checkpoint
from .synthetic import LoadedSplit, SyntheticSpec, gen_synthetic, load_split
from .train import extract_patches, saliency_maps, train_bag, train_instance

PRED_COLOR, TRUTH_COLOR = (255, 0, 0), (0, 255, 0)


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser, config_required: bool = False) -> None:
    p.add_argument("--config", required=config_required, help="flat key = value config file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--data", help="dataset root (with train/ and test/) or a split directory")
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="milguided", description="MIL-guided tiny-ROI classification pipeline")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="write the synthetic dataset")
    _common(p)

    p = sub.add_parser("train-bag", help="train the Bag Model on whole images")
    _common(p, config_required=True)

    p = sub.add_parser("patches", help="extract m saliency-guided patches per image")
    _common(p, config_required=True)
    p.add_argument("--checkpoint", required=True, help="Bag Model checkpoint")

    p = sub.add_parser("train-instance", help="train the Instance Model on patches")
    _common(p, config_required=True)
    p.add_argument("--patches", required=True, help="directory written by `patches`")
    p.add_argument("--bag-checkpoint", help="Bag Model checkpoint (needed with finetune_instance)")

    p = sub.add_parser("eval", help="weighted evaluation and localisation on a split")
    _common(p, config_required=True)
    p.add_argument("--bag-checkpoint", required=True)
    p.add_argument("--instance-checkpoint", required=True)

    p = sub.add_parser("render", help="thermal heatmaps with predicted (red) and true (green) boxes")
    _common(p, config_required=True)
    p.add_argument("--checkpoint", required=True, help="Bag Model checkpoint")
    p.add_argument("--limit", type=int, default=16, help="number of images to render")

    p = sub.add_parser("bbox", help="saliency bounding boxes as CSV")
    _common(p, config_required=True)
    p.add_argument("--checkpoint", required=True, help="Bag Model checkpoint")

    p = sub.add_parser("run", help="all four stages for one or more seeds")
    _common(p)
    p.add_argument("--seeds", default=None, help="comma-separated seeds (default: the config seed)")
    p.add_argument("--noise-ablation", action="store_true",
                   help="also train Bag Models on all vs noise-free images")

    sub.add_parser("selftest", help="check the Two-WAM worked example and the RGB fusion formula")
    return parser


def _config(args) -> Config:
    config = load_config(args.config) if getattr(args, "config", None) else Config()
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "data", None):
        changes["data_dir"] = args.data
    if getattr(args, "out", None):
        changes["out_dir"] = args.out
    return config.replace(**changes) if changes else config


def _split(config: Config, name: str) -> LoadedSplit:
    """``data_dir/name`` when present, else ``data_dir`` itself as a split."""
    root = Path(config.data_dir)
    if (root / name / "labels.csv").exists():
        return load_split(root / name, name)
    if (root / "labels.csv").exists():
        return load_split(root, name)
    raise FileNotFoundError(f"no labels.csv under {root} or {root / name}")


def _out(config: Config) -> Path:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen(args) -> None:
    config = _config(args)
    written = gen_synthetic(SyntheticSpec.from_config(config), config.data_dir)
    for split, path in written.items():
        print(f"{split}: {path}")


def cmd_train_bag(args) -> None:
    config = _config(args)
    ckpt = train_bag(config, _split(config, "train").dataset)
    path = _out(config) / "bag.ckpt"
    ckpt.save(path)
    print(f"bag model: final loss {ckpt.metadata['final_loss']:.4f} -> {path}")


def cmd_patches(args) -> None:
    config = _config(args)
    ckpt = Checkpoint.load(args.checkpoint)
    out = _out(config) / "patches"
    instances = extract_patches(ckpt, _split(config, "train").dataset, config, out)
    print(f"{len(instances)} patches -> {out}")


def cmd_train_instance(args) -> None:
    config = _config(args)
    instances = load_instances(args.patches)
    bag_ckpt = Checkpoint.load(args.bag_checkpoint) if args.bag_checkpoint else None
    ckpt = train_instance(config, instances, bag_ckpt)
    path = _out(config) / "instance.ckpt"
    ckpt.save(path)
    print(f"instance model: final loss {ckpt.metadata['final_loss']:.4f} -> {path}")


def cmd_eval(args) -> None:
    config = _config(args)
    report = evaluate(Checkpoint.load(args.bag_checkpoint), Checkpoint.load(args.instance_checkpoint),
                      _split(config, "test"), config)
    out = _out(config) / "report"
    report.write(out)
    for key, value in report.metrics().items():
        print(f"{key} = {value:.4f}")
    print(f"report -> {out}")


def _maps_and_boxes(args):
    config = _config(args)
    model = Checkpoint.load(args.checkpoint).build_model()
    split = _split(config, "test")
    images = np.stack([b.image for b in split.dataset.bags])
    maps = saliency_maps(model, images, config)
    boxes = [saliency_to_bbox(m, config.bbox_fraction) for m in maps]
    return config, split, maps, boxes


def cmd_render(args) -> None:
    config, split, maps, boxes = _maps_and_boxes(args)
    out = _out(config) / "render"
    out.mkdir(parents=True, exist_ok=True)
    count = 0
    for bag, smap, box in list(zip(split.dataset.bags, maps, boxes))[:max(args.limit, 0)]:
        gray = bag.image[0] if bag.image.shape[0] == 1 else bag.image.transpose(1, 2, 0)
        rgb = render_thermal(smap, gray)
        for truth in split.boxes.get(bag.id, []):
            rgb = draw_box(rgb, truth, TRUTH_COLOR)
        rgb = draw_box(rgb, box, PRED_COLOR)
        write_png(out / f"{bag.id}.png", rgb)
        count += 1
    print(f"{count} heatmaps -> {out}")


def cmd_bbox(args) -> None:
    config, split, maps, boxes = _maps_and_boxes(args)
    path = _out(config) / "boxes.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bag_id", "row0", "col0", "row1", "col1", "iou_vs_truth"])
        for bag, box in zip(split.dataset.bags, boxes):
            truths = split.boxes.get(bag.id, [])
            writer.writerow([bag.id, *box.as_tuple(), repr(best_iou(box, truths)) if truths else ""])
    print(f"{len(boxes)} boxes -> {path}")


def cmd_run(args) -> None:
    config = _config(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [config.seed]
    rows = []
    for seed in seeds:
        cfg = config.replace(seed=seed)
        workdir = Path(cfg.out_dir) / f"seed_{seed}"
        report = run_pipeline(cfg, workdir, Path(cfg.data_dir) / f"seed_{seed}")
        metrics = report.metrics()
        rows.append(metrics)
        print(f"seed {seed}: bag_accuracy={metrics['bag_accuracy']:.4f} "
              f"weighted_accuracy={metrics['weighted_accuracy']:.4f} hit_rate={metrics['hit_rate']:.4f} "
              f"random_hit_rate={metrics['random_hit_rate']:.4f}")
        if args.noise_ablation:
            acc = noise_ablation(cfg, workdir, Path(cfg.data_dir) / f"seed_{seed}")
            print(f"seed {seed}: noise ablation bag accuracy all={acc['all']:.4f} clean={acc['clean']:.4f}")
    if len(rows) > 1:
        for key in ("bag_accuracy", "weighted_accuracy", "hit_rate"):
            print(f"median {key} = {float(np.median([r[key] for r in rows])):.4f}")


def selftest_results() -> list[tuple[str, bool]]:
    """(message, passed) for the Two-WAM worked example and the RGB fusion formula."""
    results = []
    features = np.array([[[0.25]], [[0.01]]])
    layer = TwoWamLayer(2, 10.0, alpha=[1.0, 1.0], beta=[2.0, 0.0])
    numerator = float(two_wam_numerator(features, layer)[0, 0])
    results.append((f"T_act numerator = {numerator:.2f}", abs(numerator - 25.01) <= 1e-9))
    full = float(two_wam_forward(features, layer).data[0, 0])
    results.append((f"T_act full = {full:.6f}", abs(full - 25.01 / 101) <= 1e-12))

    anchors = rgb_fuse([0, 0, 0]) == 0.0 and rgb_fuse([255, 255, 255]) == 1.0
    results.append(("rgb_fuse anchors (0,0,0)->0 (255,255,255)->1", bool(anchors)))
    rng = np.random.default_rng(0)
    pixels = rng.integers(0, 256, size=(1000, 3))
    exact = [Fraction(int(r) + 256 * int(g) + 65536 * int(b), 255 * 65793) for r, g, b in pixels]
    err = max(abs(float(x) - float(e)) for x, e in zip(rgb_fuse(pixels), exact))
    results.append((f"rgb_fuse vs direct formula on 1000 pixels, max error {err:.1e}", err <= 1e-12))
    return results


def cmd_selftest(args) -> int:
    ok = True
    for message, passed in selftest_results():
        print(f"{message} {'PASS' if passed else 'FAIL'}")
        ok &= passed
    return 0 if ok else 1


COMMANDS = {
    "gen": cmd_gen, "train-bag": cmd_train_bag, "patches": cmd_patches,
    "train-instance": cmd_train_instance, "eval": cmd_eval, "render": cmd_render,
    "bbox": cmd_bbox, "run": cmd_run, "selftest": cmd_selftest,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args) or 0
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
