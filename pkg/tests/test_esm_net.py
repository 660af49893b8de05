import json
import struct

import numpy as np
import pytest

from config import NetConfig
from errors import DimensionError, GeometryError, UnreadableFileError
from esm_net import ESMNet, init_weights
from tensor import Tensor, gradcheck, mul, no_grad, tsum


def _input(rng, n=1, h=32, w=32, channels=5, dtype=np.float32):
    return Tensor(rng.uniform(-1.0, 1.0, size=(n, channels, h, w)).astype(dtype))


def _zero_all(net: ESMNet) -> ESMNet:
    for layer in net.weight_layers():
        layer.weight.data[...] = 0.0
        layer.bias.data[...] = 0.0
    return net


def test_activation_shapes(rng):
    net = ESMNet(NetConfig(), seed=0)
    acts = net.forward_all(_input(rng))
    assert acts.L1.shape == (1, 16, 32, 32)
    assert acts.L2.shape == (1, 32, 16, 16)
    assert acts.G.shape == (1, 128, 2, 2)
    assert acts.S1.shape == acts.M1.shape == (1, 16, 32, 32)
    assert acts.S2.shape == acts.M2.shape == (1, 32, 16, 16)
    assert acts.Q.shape == (1, 9, 32, 32)


def test_association_is_a_distribution(rng, tiny_net_config):
    q = ESMNet(tiny_net_config, seed=1)(_input(rng, n=2)).data
    assert np.all(q >= 0)
    np.testing.assert_allclose(q.sum(axis=1), 1.0, rtol=1e-5)


def test_zero_weights_give_zero_features_and_uniform_association(rng):
    net = _zero_all(ESMNet(NetConfig(), seed=0))
    acts = net.forward_all(_input(rng))
    for name in ("L1", "L2", "G", "S1", "S2", "M1", "M2"):
        assert not np.any(getattr(acts, name).data), name
    np.testing.assert_allclose(acts.Q.data, 1.0 / 9.0, rtol=1e-6)


def test_zero_head_gives_uniform_association(rng, tiny_net_config):
    net = ESMNet(tiny_net_config, seed=2)
    net.head_out.weight.data[...] = 0.0
    np.testing.assert_allclose(net(_input(rng)).data, 1.0 / 9.0, rtol=1e-6)


def test_unit_gate_without_skip_passes_decoder_features(rng, tiny_net_config):
    net = ESMNet(tiny_net_config, seed=3).eval()
    L1, L2, G = net.encode(_input(rng))
    S1, S2, M1, M2 = net.decode_with_esm(L1, L2, G, gate_override=1.0, skip=False)
    assert np.array_equal(M1.data, S1.data)
    assert np.array_equal(M2.data, S2.data)
    plain1, plain2 = net._decode(G)
    assert np.array_equal(M1.data, plain1.data)
    assert np.array_equal(M2.data, plain2.data)


def test_zero_gate_passes_skip_features(rng, tiny_net_config):
    net = ESMNet(tiny_net_config, seed=3).eval()
    L1, L2, G = net.encode(_input(rng))
    _, _, M1, M2 = net.decode_with_esm(L1, L2, G, gate_override=0.0)
    assert np.array_equal(M1.data, L1.data)
    assert np.array_equal(M2.data, L2.data)


def test_disabled_gate_sums_decoder_and_skip(rng, tiny_net_config):
    tiny_net_config.esm_gate = False
    net = ESMNet(tiny_net_config, seed=3).eval()
    L1, L2, G = net.encode(_input(rng))
    S1, _, M1, _ = net.decode_with_esm(L1, L2, G)
    np.testing.assert_array_equal(M1.data, S1.data + L1.data)


def test_seeded_initialization_is_deterministic(tiny_net_config):
    a = dict(init_weights(tiny_net_config, 11).named_tensors())
    b = dict(init_weights(tiny_net_config, 11).named_tensors())
    c = dict(init_weights(tiny_net_config, 12).named_tensors())
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_initial_weight_spread_matches_fan_in():
    net = ESMNet(NetConfig(), seed=0)
    checked = 0
    for layer in net.weight_layers():
        if layer.weight.size < 1000:
            continue
        expected = np.sqrt(2.0 / layer.fan_in)
        assert abs(layer.weight.data.std() - expected) <= 0.2 * expected, layer.weight.name
        assert not np.any(layer.bias.data)
        checked += 1
    assert checked > 10


def test_encode_rejects_bad_inputs(rng, tiny_net_config):
    net = ESMNet(tiny_net_config)
    with pytest.raises(DimensionError):
        net(_input(rng, channels=3))
    with pytest.raises(GeometryError):
        net(_input(rng, h=24, w=32))


def test_checkpoint_round_trip(tmp_path, rng, tiny_net_config):
    net = ESMNet(tiny_net_config, seed=4)
    x = _input(rng, n=2)
    net(x)
    net.eval()
    path = net.save_checkpoint(tmp_path / "ckpt" / "net.bspx")
    loaded = ESMNet.load_checkpoint(path).eval()
    assert loaded.cfg == net.cfg
    original = dict(net.named_tensors())
    for name, data in loaded.named_tensors():
        np.testing.assert_array_equal(data, original[name])
    with no_grad():
        np.testing.assert_array_equal(loaded(x).data, net(x).data)


def test_checkpoint_rejects_foreign_and_truncated_files(tmp_path, tiny_net_config):
    bogus = tmp_path / "bogus.bspx"
    bogus.write_bytes(b"PK\x03\x04 not a checkpoint")
    with pytest.raises(UnreadableFileError):
        ESMNet.load_checkpoint(bogus)
    path = ESMNet(tiny_net_config).save_checkpoint(tmp_path / "net.bspx")
    truncated = tmp_path / "short.bspx"
    truncated.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(UnreadableFileError):
        ESMNet.load_checkpoint(truncated)
    with pytest.raises(UnreadableFileError):
        ESMNet.load_checkpoint(tmp_path / "missing.bspx")


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_end_to_end_parameter_gradients(rng, mode):
    cfg = NetConfig(channels=(2, 2, 2, 2, 2), head_channels=2)
    net = ESMNet(cfg, seed=5).astype(np.float64)
    # non-trivial running statistics for eval mode; train mode differentiates through batch statistics
    for layer in net._layers():
        if hasattr(layer, "running_var"):
            layer.running_mean[...] = rng.normal(scale=0.1, size=layer.running_mean.shape)
            layer.running_var[...] = rng.uniform(0.5, 1.5, size=layer.running_var.shape)
    getattr(net, mode)()
    x = _input(rng, n=2, h=16, w=16, dtype=np.float64)
    weights = Tensor(np.random.default_rng(8).normal(size=(2, 9, 16, 16)))

    worst = gradcheck(lambda: tsum(mul(net(x), weights)), net.parameters(), h=1e-6, rtol=1e-3, atol=1e-7,
                      samples=4)
    assert max(worst.values()) <= 1.0, {k: v for k, v in worst.items() if v > 1.0}


def _write_header(path, header):
    encoded = json.dumps(header).encode("utf-8")
    path.write_bytes(b"BSPX" + struct.pack("<I", len(encoded)) + encoded)
    return path


@pytest.mark.parametrize("header", [
    {"version": 1, "tensors": []},
    {"version": 1, "config": {"in_channels": 5}},
    {"version": 1, "config": {"channels": [4, 4, 4, 4, 4], "depth": 3}, "tensors": []},
    [1, 2, 3],
])
def test_checkpoint_with_incomplete_header_is_unreadable(tmp_path, header):
    with pytest.raises(UnreadableFileError):
        ESMNet.load_checkpoint(_write_header(tmp_path / "bad.bspx", header))
