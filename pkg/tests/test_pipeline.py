import csv
import filecmp

import numpy as np
import pytest

from milguided.errors import ConfigurationError, ValidationError
from milguided.localization import BBox
from milguided.mil import Bag, Dataset, compute_metrics
from milguided.patches import load_instances
from milguided.pipeline.config import Config, load_config, parse_config
from milguided.pipeline.evaluate import evaluate, evaluate_models
from milguided.pipeline.model import Checkpoint, TinyCNN, input_stage, local_contrast
from milguided.pipeline.synthetic import LoadedSplit, SyntheticSpec, gen_synthetic, load_split, synth_image
from milguided.pipeline.train import (
    STAGE_BAG,
    STAGE_INSTANCE,
    build_model,
    clip_gradients,
    extract_patches,
    fit,
    instance_start,
    saliency_maps,
    stage_rng,
    train_bag,
    train_instance,
)
from milguided.saliency import SaliencyMap
from milguided.tensor import Tensor

SMALL = Config(image_size=32, patch_size=16, suppression_window=16, n_train=64, n_test=16,
               contrast=0.3, epochs=2, instance_epochs=2, channels=(4, 8, 8), seed=3)


def manifest(split_dir):
    with open(split_dir / "manifest.csv", newline="") as fh:
        return {row["filename"]: row for row in csv.DictReader(fh)}


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    gen_synthetic(SyntheticSpec.from_config(SMALL), root)
    return load_split(root / "train"), load_split(root / "test")


@pytest.fixture(scope="module")
def small_bag(small_data):
    return train_bag(SMALL, small_data[0].dataset)


# -- config ---------------------------------------------------------------------------------

def test_config_parse_comments_and_types(tmp_path):
    text = "# run\nimage_size = 48  # pixels\nchannels = 4,8,8\nfinetune_instance = true\nc=2.5\n\n"
    cfg = parse_config(text)
    assert (cfg.image_size, cfg.channels, cfg.finetune_instance, cfg.c) == (48, (4, 8, 8), True, 2.5)
    assert cfg.patch_size == Config().patch_size
    path = tmp_path / "cfg.txt"
    cfg.save(path)
    assert load_config(path) == cfg


def test_config_errors():
    with pytest.raises(ConfigurationError, match="unknown key"):
        parse_config("learning_rat = 0.1")
    with pytest.raises(ConfigurationError, match="bad value"):
        parse_config("epochs = many")
    with pytest.raises(ConfigurationError):
        parse_config("just a line")
    with pytest.raises(ValidationError):
        Config(patch_size=100)
    with pytest.raises(ValidationError):
        Config(dropout=1.0)
    with pytest.raises(ValidationError):
        Config(learning_rate=0.0)
    with pytest.raises(ValidationError):
        Config(grad_clip=-1.0)


# -- synthetic data --------------------------------------------------------------------------

def spec_of(**changes):
    base = dict(counts=(("train", 100),), image_size=32, contrast=0.2, seed=11)
    base.update(changes)
    return SyntheticSpec(**base)


def test_counts_are_exact(tmp_path):
    gen_synthetic(spec_of(), tmp_path)
    rows = manifest(tmp_path / "train")
    labels = [int(r["label"]) for r in rows.values()]
    assert len(labels) == 100 and sum(labels) == 50
    assert all((r["label"] == "1") == (int(r["n_blobs"]) >= 1) for r in rows.values())
    assert all(1 <= int(r["n_blobs"]) <= 5 for r in rows.values() if r["label"] == "1")


def test_same_seed_gives_identical_files(tmp_path):
    gen_synthetic(spec_of(), tmp_path / "a")
    gen_synthetic(spec_of(), tmp_path / "b")
    cmp = filecmp.dircmp(tmp_path / "a" / "train", tmp_path / "b" / "train")
    names = [p.name for p in (tmp_path / "a" / "train" / "images").iterdir()]
    _, mismatch, errors = filecmp.cmpfiles(tmp_path / "a" / "train" / "images",
                                           tmp_path / "b" / "train" / "images", names, shallow=False)
    assert not mismatch and not errors and not cmp.diff_files


def test_blur_changes_only_images_flagged_noisy(tmp_path):
    gen_synthetic(spec_of(noise_mode="none"), tmp_path / "none")
    gen_synthetic(spec_of(noise_mode="blur"), tmp_path / "blur")
    flags = manifest(tmp_path / "blur" / "train")
    assert any(r["noisy"] == "1" for r in flags.values())
    for name, row in flags.items():
        same = filecmp.cmp(tmp_path / "none" / "train" / "images" / name,
                           tmp_path / "blur" / "train" / "images" / name, shallow=False)
        assert same == (row["noisy"] == "0")


def test_background_range_and_blob_peaks():
    spec = spec_of(noise_mode="none", contrast=0.15)
    flat = spec_of(noise_mode="none", contrast=0.0)
    for seed in range(20):
        img = synth_image(np.random.default_rng(seed), spec, 1)
        bg = synth_image(np.random.default_rng(seed), flat, 1)
        assert 0.2 - 1e-12 <= bg.pixels.min() and bg.pixels.max() <= 0.6 + 1e-12
        for box in img.boxes:
            lift = img.pixels[0, box.row0:box.row1, box.col0:box.col1] - bg.pixels[0, box.row0:box.row1, box.col0:box.col1]
            assert lift.max() >= 0.15 - 1e-12
        assert not synth_image(np.random.default_rng(seed), spec, 0).boxes


def test_brightness_shift_is_bounded():
    spec = spec_of(noise_mode="brightness", noise_probability=1.0)
    plain = spec_of(noise_mode="none")
    for seed in range(20):
        a = synth_image(np.random.default_rng(seed), spec, 0).pixels
        b = synth_image(np.random.default_rng(seed), plain, 0).pixels
        shift = np.unique(np.round(a - b, 12))
        assert len(shift) == 1 and abs(shift[0]) <= 0.2


def test_invalid_synthetic_spec():
    with pytest.raises(ValidationError):
        spec_of(positive_fraction=1.0)
    with pytest.raises(ValidationError):
        spec_of(radius=(0.5, 2.0))


def test_load_split_reads_boxes_and_flags(small_data):
    train, _ = small_data
    assert len(train.dataset) == 64
    positives = [b for b in train.dataset.bags if b.label == 1]
    assert all(train.boxes[b.id] for b in positives)
    assert all(not train.boxes[b.id] for b in train.dataset.bags if b.label == 0)
    assert train.dataset.bags[0].image.shape == (1, 32, 32)


# -- model and checkpoints -----------------------------------------------------------------------

def test_input_stage_examples():
    flat = np.full((1, 8, 8), 0.7)
    np.testing.assert_allclose(local_contrast(flat), 0.0, atol=1e-12)
    np.testing.assert_allclose(input_stage(flat), (0.7 - 0.4) / 0.15, atol=1e-9)
    spot = np.zeros((1, 9, 9))
    spot[0, 4, 4] = 0.005
    assert local_contrast(spot)[0, 4, 4] == pytest.approx(24 / 25, abs=1e-12)


def test_feature_grid_and_channel_check():
    model = TinyCNN(rng=np.random.default_rng(0))
    assert model.feature_maps(np.zeros((1, 96, 96))).shape == (16, 24, 24)
    with pytest.raises(ConfigurationError):
        model.feature_maps(np.zeros((3, 96, 96)))


def test_checkpoint_round_trip_is_bit_identical(small_bag, tmp_path):
    small_bag.save(tmp_path / "a.ckpt")
    back = Checkpoint.load(tmp_path / "a.ckpt")
    back.save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    for name, value in small_bag.weights.items():
        assert np.array_equal(value, back.weights[name])
    assert {"two_wam.alpha", "two_wam.beta"} <= set(back.weights)
    assert back.architecture["c"] == 10.0


def test_checkpoint_version_mismatch_rejected(small_bag):
    text = small_bag.to_json().replace('"version": 1', '"version": 2')
    with pytest.raises(ConfigurationError, match="version"):
        Checkpoint.from_json(text)
    with pytest.raises(ConfigurationError):
        Checkpoint.from_json("{not json")


# -- training ---------------------------------------------------------------------------------

def test_train_bag_lowers_loss_and_logs_epochs(small_bag):
    meta = small_bag.metadata
    assert len(meta["epoch_losses"]) == 2
    assert meta["final_loss"] < meta["initial_loss"]
    assert meta["stage"] == "bag" and meta["seed"] == 3


def test_train_bag_is_deterministic(small_data, small_bag):
    again = train_bag(SMALL, small_data[0].dataset)
    assert again.to_json() == small_bag.to_json()


def test_train_bag_needs_both_classes(small_data):
    bags = [b for b in small_data[0].dataset.bags if b.label == 1]
    with pytest.raises(ValidationError, match="both classes"):
        train_bag(SMALL, Dataset(bags))


def test_bright_vs_dark_is_learned():
    n = 64
    y = np.arange(n) % 2
    images = np.where(y[:, None, None, None] == 1, 0.8, 0.2) * np.ones((n, 1, 32, 32))
    model = build_model(SMALL, stage_rng(0, STAGE_BAG))
    fit(model, images, y, SMALL.replace(epochs=20), 20, stage_rng(0, STAGE_BAG))
    assert np.mean((model.predict(images) >= 0.5) == y) >= 0.95


def test_clip_gradients_rescales_global_norm():
    a, b = Tensor(np.zeros(2), requires_grad=True), Tensor(np.zeros(1), requires_grad=True)
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert clip_gradients([a, b], 1.0) == 5.0
    np.testing.assert_allclose(np.concatenate([a.grad, b.grad]), [0.6, 0.0, 0.8], atol=1e-15)
    a.grad, b.grad = np.array([0.3, 0.0]), np.array([0.4])
    clip_gradients([a, b], 1.0)
    assert a.grad.tolist() == [0.3, 0.0] and b.grad.tolist() == [0.4]
    a.grad = np.array([30.0, 0.0])
    clip_gradients([a, b], 0.0)
    assert a.grad.tolist() == [30.0, 0.0]


def test_stage_generators_are_independent():
    a = stage_rng(5, STAGE_BAG).random(4)
    b = stage_rng(5, STAGE_INSTANCE).random(4)
    assert not np.array_equal(a, b)
    assert np.array_equal(a, stage_rng(5, STAGE_BAG).random(4))


def test_instance_start_fresh_vs_finetuned(small_bag):
    fresh, _ = instance_start(SMALL, small_bag)
    expected = build_model(SMALL, stage_rng(SMALL.seed, STAGE_INSTANCE)).state_dict()
    for name, value in fresh.state_dict().items():
        assert np.array_equal(value, expected[name])
    tuned, _ = instance_start(SMALL.replace(finetune_instance=True), small_bag)
    for name, value in tuned.state_dict().items():
        assert np.array_equal(value, small_bag.weights[name])
    with pytest.raises(ConfigurationError):
        instance_start(SMALL.replace(finetune_instance=True), None)


def test_train_instance_lowers_loss(small_data, small_bag):
    instances = extract_patches(small_bag, small_data[0].dataset, SMALL)
    assert len(instances) == 5 * 64
    ckpt = train_instance(SMALL, instances, small_bag)
    assert ckpt.metadata["final_loss"] < ckpt.metadata["initial_loss"]
    assert ckpt.metadata["stage"] == "instance" and not ckpt.metadata["finetuned"]
    with pytest.raises(ValidationError):
        train_instance(SMALL, [])


# -- patch extraction ------------------------------------------------------------------------------

def test_extract_patches_files_sizes_and_rank_one(small_data, small_bag, tmp_path):
    dataset = small_data[1].dataset
    instances = extract_patches(small_bag, dataset, SMALL, tmp_path)
    assert len(list((tmp_path / "patches").glob("*.png"))) == 5 * len(dataset)
    assert all(inst.pixels.shape == (1, 16, 16) for inst in instances)
    maps = saliency_maps(small_bag.build_model(), np.stack([b.image for b in dataset.bags]), SMALL)
    for bag, smap, group in zip(dataset.bags, maps, np.array_split(np.arange(len(instances)), len(dataset))):
        first = instances[group[0]]
        assert first.bag_id == bag.id and first.rank == 1
        assert first.center == np.unravel_index(np.argmax(smap.values), smap.shape)
        assert all(instances[i].label == bag.label for i in group)


def test_extract_patches_rejects_mismatched_checkpoint(small_data, small_bag):
    with pytest.raises(ConfigurationError, match="channels"):
        extract_patches(small_bag, small_data[1].dataset, SMALL.replace(channels=(8, 16, 16)))


# -- evaluation ----------------------------------------------------------------------------------

class StubModel:
    """Probability per image from a lookup on the image's mean value."""

    def __init__(self, by_mean):
        self.by_mean = by_mean
        self.seen = []

    def predict(self, images):
        self.seen.append(np.array(images))
        return np.array([self.by_mean(float(x.mean())) for x in images])


def two_bag_split():
    pos = Bag(np.full((1, 32, 32), 0.8), 1, "pos")
    neg = Bag(np.full((1, 32, 32), 0.2), 0, "neg")
    return LoadedSplit(Dataset([pos, neg], "test"), {"pos": [BBox(4, 4, 8, 8)], "neg": []},
                       {"pos": False, "neg": False})


def crafted_maps():
    values = np.zeros((32, 32))
    values[4:8, 4:8] = 1.0
    return [SaliencyMap(values, (32, 32), (32, 32))] * 2


def test_evaluate_with_stub_models():
    split = two_bag_split()
    bag = StubModel(lambda v: 0.3 if v > 0.5 else 0.6)
    inst = StubModel(lambda v: 0.9 if v > 0.5 else 0.1)
    report = evaluate_models(bag, inst, split, SMALL, crafted_maps())
    m = report.metrics()
    assert (m["bag_accuracy"], m["bag_f1"]) == compute_metrics([(0.3, 1), (0.6, 0)])
    assert (m["weighted_accuracy"], m["weighted_f1"]) == (1.0, 1.0)
    assert (m["instance_accuracy"], m["instance_f1"]) == (1.0, 1.0)
    assert [r.we_p for r in report.rows] == pytest.approx([0.9, 0.1], abs=1e-15)
    assert report.summary() == "accuracy=1.000000,f1=1.000000"


def test_constant_instance_probabilities_match_single_patch_decision():
    report = evaluate_models(StubModel(lambda v: 0.5), StubModel(lambda v: 0.55), two_bag_split(),
                             SMALL, crafted_maps())
    for row in report.rows:
        assert row.we_p == pytest.approx(0.55, abs=1e-15)
        assert (row.we_p >= 0.5) == (row.instance_p[0] >= 0.5)


def test_crafted_box_gives_hit_and_unit_iou():
    report = evaluate_models(StubModel(lambda v: 0.5), StubModel(lambda v: 0.5), two_bag_split(),
                             SMALL, crafted_maps())
    assert report.rows[0].box == BBox(4, 4, 8, 8)
    assert report.n_localized == 1 and report.hit_rate == 1.0 and report.mean_iou == 1.0
    assert 0 < report.random_hit_rate < 1


def test_instances_scored_equal_extracted_patches(small_data, small_bag, tmp_path):
    test = small_data[1]
    extract_patches(small_bag, test.dataset, SMALL, tmp_path)
    saved = np.stack([inst.pixels for inst in load_instances(tmp_path)])
    recorder = StubModel(lambda v: 0.5)
    evaluate_models(small_bag.build_model(), recorder, test, SMALL)
    (scored,) = recorder.seen
    assert scored.tobytes() == saved.tobytes()


def test_evaluate_report_files_and_architecture_check(small_data, small_bag, tmp_path):
    report = evaluate(small_bag, small_bag, small_data[1], SMALL)
    for key, value in report.metrics().items():
        if key != "n_localized":
            assert 0.0 <= value <= 1.0, key
    report.write(tmp_path)
    names = {p.name for p in tmp_path.iterdir()}
    assert {"predictions.csv", "bag_predictions.csv", "report.csv", "boxes.csv", "summary.txt"} <= names
    with pytest.raises(ConfigurationError):
        evaluate(small_bag, small_bag, small_data[1], SMALL.replace(c=5.0))
