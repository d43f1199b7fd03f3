import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image
from scipy import ndimage

from milguided.errors import ConfigurationError, DimensionError, ValidationError
from milguided.saliency import (
    SaliencyMap,
    bilinear_resize,
    cam,
    grad_cam,
    normalize,
    render_thermal,
    thermal_colors,
    to_saliency,
    write_png,
)
from milguided.tensor import Tensor, dense, global_avg_pool, tmean
from milguided.two_wam import ActivationMap


class LinearHeadModel:
    """Features are the input itself; score = head_w . GAP(features)."""

    def __init__(self, head_w):
        self.head_w = np.asarray(head_w, dtype=np.float64)

    def feature_maps(self, x):
        return x

    def head(self, features):
        return dense(global_avg_pool(features), Tensor(self.head_w[None]), Tensor([0.3])).reshape(())


class MeanScoreModel:
    def feature_maps(self, x):
        return x

    def head(self, features):
        return tmean(features)


class ConstantScoreModel:
    def feature_maps(self, x):
        return x

    def head(self, features):
        return Tensor(1.5)


# -- cam ----------------------------------------------------------------------------

def test_cam_examples():
    f = np.random.default_rng(0).normal(size=(1, 3, 4))
    np.testing.assert_array_equal(cam(f, [1.0], "identity").values, f[0])
    assert cam(np.array([[[3.0]], [[5.0]]]), [1.0, -1.0], "relu").values.tolist() == [[0.0]]
    g = np.random.default_rng(1).normal(size=(3, 4))
    np.testing.assert_allclose(cam(np.stack([g, g]), [0.5, 0.5], "identity").values, g, atol=1e-15)


def test_cam_weight_count_mismatch():
    with pytest.raises(DimensionError):
        cam(np.zeros((2, 3, 3)), [1.0, 2.0, 3.0])


# -- grad_cam -------------------------------------------------------------------------

def test_grad_cam_of_mean_score():
    f = np.random.default_rng(2).normal(size=(1, 4, 5))
    out = grad_cam(MeanScoreModel(), f)
    np.testing.assert_allclose(out.values, np.maximum(f[0], 0) / 20, atol=1e-15)
    assert np.unravel_index(out.values.argmax(), out.shape) == np.unravel_index(f[0].argmax(), f[0].shape)


def test_grad_cam_of_constant_score_is_zero():
    out = grad_cam(ConstantScoreModel(), np.ones((2, 3, 3)))
    np.testing.assert_array_equal(out.values, np.zeros((3, 3)))


@pytest.mark.parametrize("seed", range(20))
def test_grad_cam_equals_cam_on_linear_heads(seed):
    rng = np.random.default_rng(seed)
    k, h, w = int(rng.integers(1, 5)), int(rng.integers(2, 7)), int(rng.integers(2, 7))
    head_w = rng.normal(size=k)
    f = rng.normal(size=(k, h, w))
    expected = cam(f, head_w / (h * w), "relu").values
    np.testing.assert_allclose(grad_cam(LinearHeadModel(head_w), f).values, expected, atol=1e-9)


def test_grad_cam_needs_feature_layer():
    with pytest.raises(ConfigurationError):
        grad_cam(object(), np.zeros((1, 2, 2)))


def test_grad_cam_does_not_touch_model_weights():
    from milguided.pipeline.model import TinyCNN

    model = TinyCNN(rng=np.random.default_rng(0))
    out = grad_cam(model, np.random.default_rng(1).uniform(size=(1, 16, 16)))
    assert out.shape == (4, 4)
    assert all(p.grad is None for p in model.parameters())


# -- resize and normalisation ---------------------------------------------------------------

def test_to_saliency_examples():
    s = to_saliency(ActivationMap([[0.0, 1.0], [1.0, 0.0]]), (2, 2))
    assert s.values.tolist() == [[0.0, 1.0], [1.0, 0.0]]
    assert to_saliency(np.full((3, 3), 4.2), (6, 6)).values.tolist() == np.zeros((6, 6)).tolist()
    s = to_saliency(np.array([[2.0, 6.0]]), (1, 3))
    np.testing.assert_allclose(s.values, [[0.0, 0.5, 1.0]], atol=1e-15)
    assert s.source_size == (1, 2) and s.image_size == (1, 3)


def test_to_saliency_rejects_downscaling():
    with pytest.raises(ValidationError):
        to_saliency(np.zeros((4, 4)), (3, 8))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_bilinear_matches_scipy_corner_aligned_zoom(seed):
    rng = np.random.default_rng(seed)
    h, w = int(rng.integers(2, 8)), int(rng.integers(2, 8))
    big = (h + int(rng.integers(0, 20)), w + int(rng.integers(0, 20)))
    v = rng.normal(size=(h, w))
    # grid_mode=False samples at i * (h - 1) / (H - 1): corner aligned
    oracle = ndimage.zoom(v, (big[0] / h, big[1] / w), order=1, mode="nearest", grid_mode=False)
    assert oracle.shape == big
    np.testing.assert_allclose(bilinear_resize(v, big), oracle, atol=1e-12)


def test_bilinear_one_pixel_map_is_constant():
    np.testing.assert_array_equal(bilinear_resize(np.array([[3.0]]), (4, 5)), np.full((4, 5), 3.0))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_normalisation_properties(seed):
    rng = np.random.default_rng(seed)
    h, w = int(rng.integers(1, 7)), int(rng.integers(2, 7))
    m = rng.normal(size=(h, w))
    factor = int(rng.integers(1, 5))
    # with H - 1 = factor * (h - 1) original grid point i lands exactly on pixel i * factor
    big = (factor * (h - 1) + 1 if h > 1 else factor, factor * (w - 1) + 1)
    s = to_saliency(m, big).values
    assert s.min() == 0.0 and s.max() == 1.0
    rows = np.arange(h) * factor
    cols = np.arange(w) * factor
    on_grid = s[np.ix_(rows, cols)]
    order = np.argsort(m, axis=None)
    assert np.all(np.diff(on_grid.reshape(-1)[order]) > 0)
    a, b = rng.uniform(0.01, 100.0), rng.normal() * 10
    np.testing.assert_allclose(to_saliency(a * m + b, s.shape).values, s, atol=1e-9)


def test_normalize_constant_is_zero():
    assert normalize(np.full((2, 3), -7.0)).tolist() == np.zeros((2, 3)).tolist()


def test_saliency_map_validation():
    with pytest.raises(ValidationError):
        SaliencyMap(np.array([[1.5]]), (1, 1), (1, 1))
    with pytest.raises(DimensionError):
        SaliencyMap(np.zeros((2, 2)), (1, 1), (3, 3))


# -- thermal rendering ----------------------------------------------------------------------------

def test_thermal_anchors():
    assert thermal_colors(np.array(0.0)).tolist() == [0, 0, 255]
    assert thermal_colors(np.array(0.5)).tolist() == [255, 255, 0]
    assert thermal_colors(np.array(1.0)).tolist() == [255, 0, 0]
    assert thermal_colors(np.array(0.25)).tolist() == [128, 128, 128]


def test_thermal_is_continuous():
    v = np.arange(513) / 512
    rgb = thermal_colors(v).astype(int)
    assert np.abs(np.diff(rgb, axis=0)).max() <= 2


def test_render_blends_over_image(tmp_path):
    smap = SaliencyMap(np.array([[0.0, 1.0]]), (1, 2), (1, 2))
    assert render_thermal(smap).tolist() == [[[0, 0, 255], [255, 0, 0]]]
    blended = render_thermal(smap, np.array([[0, 255]], dtype=np.uint8))
    assert blended.tolist() == [[[0, 0, 128], [255, 128, 128]]]
    path = tmp_path / "heat.png"
    write_png(path, blended)
    assert np.asarray(Image.open(path)).tolist() == blended.tolist()
    with pytest.raises(DimensionError):
        render_thermal(smap, np.zeros((2, 2)))
