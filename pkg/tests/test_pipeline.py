import numpy as np
import pytest

from config import SlicConfig
from errors import ParameterError
from esm_net import ESMNet
from pipeline import grid_segmenter, infer_superpixels, interval_for_count, predict_association, slic_segmenter
from spix_core import decode_hard, init_grid, is_connected


@pytest.fixture
def net(tiny_net_config):
    return ESMNet(tiny_net_config, seed=2)


def test_interval_for_count():
    assert interval_for_count(32, 32, 4) == 16
    assert interval_for_count(32, 32, 16) == 8
    assert interval_for_count(208, 208, 169) == 16
    assert interval_for_count(4, 4, 1000) == 1
    with pytest.raises(ParameterError):
        interval_for_count(32, 32, 0)


def test_association_is_a_distribution(net, scene_32):
    Q = predict_association(net, scene_32[0])
    assert Q.shape == (9, 32, 32)
    np.testing.assert_allclose(Q.sum(axis=0), 1.0, rtol=1e-5)


def test_default_interval_decodes_directly(net, scene_32):
    image = scene_32[0]
    expected = decode_hard(predict_association(net, image), init_grid(32, 32, 16), 16)
    sp = infer_superpixels(net, image)
    np.testing.assert_array_equal(sp.labels, expected.labels)


@pytest.mark.parametrize("S", [8, 12, 24])
def test_other_intervals_cover_the_image_with_connected_superpixels(net, scene_32, S):
    sp = infer_superpixels(net, scene_32[0], S)
    assert sp.labels.shape == (32, 32)
    assert set(np.unique(sp.labels).tolist()) == set(range(sp.count))
    assert is_connected(sp)


def test_unaligned_extent_is_resampled(net):
    image = np.random.default_rng(0).uniform(size=(20, 27, 3))
    sp = infer_superpixels(net, image)
    assert sp.labels.shape == (20, 27)
    assert is_connected(sp)


def test_invalid_interval(net, scene_32):
    with pytest.raises(ParameterError):
        infer_superpixels(net, scene_32[0], 0)


def test_finer_grid_gives_more_superpixels(scene_64):
    image = scene_64[0]
    assert grid_segmenter(image, 32).count == 4
    assert grid_segmenter(image, 16).count == 16


def test_slic_segmenter_targets_the_interval(scene_64):
    segment = slic_segmenter(SlicConfig(compactness=10.0, iterations=5))
    sp = segment(scene_64[0], 16)
    assert sp.labels.shape == (64, 64)
    assert 8 <= sp.count <= 24


@pytest.mark.parametrize("S", [16, 11])
def test_inference_is_repeatable(net, scene_32, S):
    first = infer_superpixels(net, scene_32[0], S)
    second = infer_superpixels(net, scene_32[0], S)
    np.testing.assert_array_equal(first.labels, second.labels)
    assert first.count == second.count
