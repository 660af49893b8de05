import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as nph
from scipy import ndimage

from errors import ParameterError, UsageError
from spix_core import (OWNER_CHANNEL, SuperpixelMap, aggregate, connected_components, decode_hard,
                       enforce_connectivity, grid_tiling, init_grid, is_connected, reconstruct, renormalize)
from tensor import Tensor, gradcheck, mul, softmax, tsum


def _owner_delta(H, W, n=1):
    q = np.zeros((n, 9, H, W))
    q[:, OWNER_CHANNEL] = 1.0
    return q


def _random_assoc(rng, H, W, n=1, scale=3.0):
    logits = rng.normal(scale=scale, size=(n, 9, H, W))
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _assert_single_region_per_id(sp: SuperpixelMap):
    for label in range(sp.count):
        _, n = ndimage.label(sp.labels == label)
        assert n == 1, f"superpixel {label} has {n} regions"


# ---------------------------------------------------------------------------
# Grid
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("H,W,S,expected", [(208, 208, 16, 169), (16, 16, 16, 1), (17, 17, 16, 4), (64, 48, 16, 12)])
def test_grid_cell_counts(H, W, S, expected):
    assert init_grid(H, W, S).n_cells == expected


@pytest.mark.parametrize("H,W,S", [(0, 16, 16), (16, 16, 0), (16, 8, 16)])
def test_grid_rejects_bad_parameters(H, W, S):
    with pytest.raises(ParameterError):
        init_grid(H, W, S)


def test_single_cell_grid_has_only_owner_neighbor():
    ids = init_grid(16, 16, 16).neighbor_ids()
    assert np.all(ids[OWNER_CHANNEL] == 0)
    assert np.all(np.delete(ids, OWNER_CHANNEL, axis=0) == -1)


def test_neighbor_ids_follow_channel_order():
    grid = init_grid(12, 12, 4)
    ids = grid.neighbor_ids()
    # pixel in the middle cell (1, 1)
    assert ids[:, 5, 5].tolist() == [0, 1, 2, 3, 4, 5, 6, 7, 8]


def test_renormalize_zeroes_outside_channels(rng):
    grid = init_grid(8, 8, 4)
    q = renormalize(Tensor(_random_assoc(rng, 8, 8)), grid).data
    np.testing.assert_allclose(q.sum(axis=1), 1.0)
    assert np.all(q[0, :3, 0, 0] == 0.0)
    assert np.all(q[0, [0, 3, 6], 0, 0] == 0.0)


# ---------------------------------------------------------------------------
# Aggregation and reconstruction
# ---------------------------------------------------------------------------

def test_aggregate_single_cell_mean():
    grid = init_grid(2, 2, 2)
    feats = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    centers = aggregate(Tensor(_owner_delta(2, 2)), Tensor(feats), grid)
    assert centers.shape == (1, 1, 1, 1)
    assert centers.data[0, 0, 0, 0] == pytest.approx(2.5)
    recon = reconstruct(Tensor(_owner_delta(2, 2)), centers, grid)
    np.testing.assert_allclose(recon.data, 2.5)


def test_owner_delta_reproduces_cellwise_constant_features():
    grid = init_grid(8, 8, 4)
    feats = np.stack([grid.owner_map() * 1.5, -grid.owner_map().astype(float)])[None]
    q = Tensor(_owner_delta(8, 8))
    recon = reconstruct(q, aggregate(q, Tensor(feats), grid), grid)
    np.testing.assert_allclose(recon.data, feats)


def test_uniform_features_survive_any_association(rng):
    grid = init_grid(16, 12, 4)
    feats = np.full((2, 3, 16, 12), 0.25)
    q = Tensor(_random_assoc(rng, 16, 12, n=2))
    centers = aggregate(q, Tensor(feats), grid)
    np.testing.assert_allclose(centers.data, 0.25)
    np.testing.assert_allclose(reconstruct(q, centers, grid).data, 0.25)


@given(st.integers(0, 2 ** 31 - 1))
def test_reconstruction_stays_within_feature_range(seed):
    rng = np.random.default_rng(seed)
    grid = init_grid(12, 8, 4)
    feats = rng.uniform(-2.0, 3.0, size=(1, 2, 12, 8))
    q = Tensor(_random_assoc(rng, 12, 8))
    recon = reconstruct(q, aggregate(q, Tensor(feats), grid), grid).data
    for c in range(2):
        assert recon[0, c].min() >= feats[0, c].min() - 1e-9
        assert recon[0, c].max() <= feats[0, c].max() + 1e-9


def test_aggregate_rejects_mismatched_shapes():
    grid = init_grid(8, 8, 4)
    with pytest.raises(UsageError):
        aggregate(Tensor(_owner_delta(8, 8)), Tensor(np.zeros((1, 2, 8, 6))), grid)
    with pytest.raises(UsageError):
        aggregate(Tensor(np.zeros((1, 8, 8, 8))), Tensor(np.zeros((1, 2, 8, 8))), grid)


def test_superpixel_operation_gradients(rng):
    grid = init_grid(8, 8, 4)
    logits = Tensor(rng.normal(size=(1, 9, 8, 8)), requires_grad=True, name="logits")
    feats = Tensor(rng.normal(size=(1, 3, 8, 8)), requires_grad=True, name="feats")
    weights = Tensor(np.random.default_rng(9).normal(size=(1, 3, 8, 8)))

    def fn():
        q = renormalize(softmax(logits, axis=1), grid)
        centers = aggregate(q, feats, grid, normalized=True)
        return tsum(mul(reconstruct(q, centers, grid, normalized=True), weights))

    worst = gradcheck(fn, [logits, feats], h=1e-6, rtol=1e-4, atol=1e-8, samples=60)
    assert max(worst.values()) <= 1.0, worst


# ---------------------------------------------------------------------------
# Hard decoding
# ---------------------------------------------------------------------------

def test_peaked_owner_decodes_to_grid():
    grid = init_grid(32, 48, 16)
    sp = decode_hard(_owner_delta(32, 48), grid)
    np.testing.assert_array_equal(sp.labels, grid_tiling(grid).labels)
    assert sp.count == 6


def test_uniform_association_decodes_to_grid():
    grid = init_grid(32, 32, 16)
    sp = decode_hard(np.full((9, 32, 32), 1.0 / 9.0), grid)
    np.testing.assert_array_equal(sp.labels, grid.owner_map())


def test_steered_pixel_joins_neighbor_cell():
    grid = init_grid(4, 4, 2)
    q = _owner_delta(4, 4)
    q[0, :, 0, 1] = 0.0
    q[0, 5, 0, 1] = 1.0
    sp = decode_hard(q, grid, min_size=1)
    expected = np.array([[0, 1, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]])
    np.testing.assert_array_equal(sp.labels, expected)


def test_ties_prefer_lowest_cell_when_owner_loses():
    grid = init_grid(4, 4, 2)
    q = _owner_delta(4, 4)
    # pixel (1, 1) of cell 0 splits its mass between cells 1 (right) and 2 (below)
    q[0, :, 1, 1] = 0.0
    q[0, 5, 1, 1] = 0.5
    q[0, 7, 1, 1] = 0.5
    sp = decode_hard(q, grid, min_size=1)
    assert sp.labels[1, 1] == 1


def test_decode_rejects_batches():
    grid = init_grid(8, 8, 4)
    with pytest.raises(UsageError):
        decode_hard(_owner_delta(8, 8, n=2), grid)


def test_random_associations_decode_to_valid_maps(rng):
    grid = init_grid(32, 32, 8)
    for _ in range(100):
        sp = decode_hard(_random_assoc(rng, 32, 32), grid)
        assert sp.labels.shape == (32, 32)
        assert sp.labels.min() == 0
        assert np.unique(sp.labels).size == sp.count
        assert sp.sizes().min() >= 1
        assert is_connected(sp)
    _assert_single_region_per_id(sp)


# ---------------------------------------------------------------------------
# Connectivity
# ---------------------------------------------------------------------------

def _flood_fill_components(labels):
    h, w = labels.shape
    out = np.full((h, w), -1)
    n = 0
    for y in range(h):
        for x in range(w):
            if out[y, x] >= 0:
                continue
            stack = [(y, x)]
            out[y, x] = n
            while stack:
                cy, cx = stack.pop()
                for ny, nx in ((cy - 1, cx), (cy + 1, cx), (cy, cx - 1), (cy, cx + 1)):
                    if 0 <= ny < h and 0 <= nx < w and out[ny, nx] < 0 and labels[ny, nx] == labels[cy, cx]:
                        out[ny, nx] = n
                        stack.append((ny, nx))
            n += 1
    return out, n


@given(nph.arrays(np.int64, st.tuples(st.integers(1, 9), st.integers(1, 9)), elements=st.integers(-2, 3)))
def test_connected_components_match_flood_fill(labels):
    components, n = connected_components(labels)
    expected, expected_n = _flood_fill_components(labels)
    assert n == expected_n
    np.testing.assert_array_equal(components, expected)


def test_noisy_full_size_decode_is_connected(rng):
    grid = init_grid(208, 208, 16)
    sp = decode_hard(_random_assoc(rng, 208, 208, scale=6.0), grid)
    assert sp.labels.shape == (208, 208)
    assert np.unique(sp.labels).size == sp.count
    assert is_connected(sp)


def test_connected_components_number_by_anchor():
    labels = np.array([[1, 0, 1], [1, 0, 0], [0, 1, 1]])
    components, n = connected_components(labels)
    assert n == 5
    assert components.tolist() == [[0, 1, 2], [0, 1, 1], [3, 4, 4]]
    assert ndimage.label(labels == 1)[1] + ndimage.label(labels == 0)[1] == n


def test_orphan_fragment_is_absorbed():
    labels = np.zeros((6, 6), dtype=int)
    labels[:, 3:] = 1
    labels[2, 1] = 1
    sp = enforce_connectivity(labels, min_size=1)
    expected = np.zeros((6, 6), dtype=int)
    expected[:, 3:] = 1
    np.testing.assert_array_equal(sp.labels, expected)


def test_equal_fragments_keep_first_in_raster_order():
    labels = np.ones((6, 6), dtype=int)
    labels[:2, :2] = 0
    labels[4:, 4:] = 0
    sp = enforce_connectivity(labels, min_size=1)
    expected = np.ones((6, 6), dtype=int)
    expected[:2, :2] = 0
    np.testing.assert_array_equal(sp.labels, expected)
    assert sp.count == 2


def test_small_superpixels_are_absorbed():
    labels = np.zeros((8, 8), dtype=int)
    labels[:, 4:] = 1
    labels[0, 0] = 2
    sp = enforce_connectivity(labels, min_size=4)
    assert sp.count == 2
    assert sp.labels[0, 0] == sp.labels[0, 1]


def test_connected_map_is_only_densified():
    labels = np.array([[5, 5, 9, 9], [5, 5, 9, 9], [12, 12, 12, 12]])
    sp = enforce_connectivity(labels, min_size=1)
    assert sp.labels.tolist() == [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 2, 2]]
    assert sp.count == 3


def test_everything_small_keeps_largest_component():
    labels = np.array([[0, 1], [2, 2]])
    sp = enforce_connectivity(labels, min_size=16)
    assert sp.count == 1


@given(nph.arrays(np.int64, (10, 10), elements=st.integers(0, 4)), st.integers(1, 6))
def test_enforcement_yields_connected_dense_maps(labels, min_size):
    sp = enforce_connectivity(labels, min_size=min_size)
    assert is_connected(sp)
    assert set(np.unique(sp.labels).tolist()) == set(range(sp.count))
    _assert_single_region_per_id(sp)


def test_superpixel_map_from_labels_densifies():
    sp = SuperpixelMap.from_labels(np.array([[3, 3], [7, 11]]))
    assert sp.labels.tolist() == [[0, 0], [1, 2]]
    assert sp.sizes().tolist() == [2, 1, 1]
