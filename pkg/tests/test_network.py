import numpy as np
import pytest

from wavesense.config import PRESETS, ConfigError, WaveSenseConfig
from wavesense.network import (WaveSenseNet, build, forward, param_shapes, parameter_count,
                               perturbation_horizon, state_footprint, temporal_memory)
from wavesense.neuron import SpikeRaster
from wavesense.signal import InvalidInputError
from wavesense.trainer import init_weights

SYN = PRESETS["synthetic"]


def _raster(seed=0, bins=80, rate=0.4, channels=64):
    return np.random.default_rng(seed).poisson(rate, (channels, bins))


def test_aloha_parameter_count_magnitude():
    counts = parameter_count(PRESETS["aloha"])
    # independent count from the layer list
    res, skip, hid, n_in, n_blocks = 16, 32, 32, 64, 12
    weights = n_in * res + n_blocks * (3 * res * res + skip * res) + skip * hid + hid * 2
    biases = res + n_blocks * (2 * res + skip) + hid + 2
    assert counts["weights"] == weights
    assert counts["total"] == weights + biases
    assert 15000 < counts["total"] < 21000


def test_minimal_instance():
    cfg = WaveSenseConfig(n_classes=1, n_channels_in=1, n_channels_res=1, n_channels_skip=1,
                          n_hidden=1, dilations=(3,))
    shapes = param_shapes(cfg)
    weights = {k: s for k, s in shapes.items() if k.endswith("weight")}
    assert sorted(weights) == sorted(["input.weight", "blocks.0.fast.weight", "blocks.0.slow.weight",
                                      "blocks.0.res.weight", "blocks.0.skip.weight",
                                      "hidden.weight", "readout.weight"])
    assert all(s == (1, 1) for s in weights.values())
    no_bias = cfg.replace(bias=False)
    assert parameter_count(no_bias)["total"] == 7


def test_same_seed_same_weights():
    a, b = build(SYN, seed=4), build(SYN, seed=4)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    c = build(SYN, seed=5)
    assert not np.array_equal(a.params["input.weight"], c.params["input.weight"])


def test_invalid_config():
    with pytest.raises(ConfigError):
        WaveSenseConfig(kernel_size=3)
    with pytest.raises(ConfigError):
        WaveSenseConfig(dilations=())
    with pytest.raises(ConfigError):
        WaveSenseConfig(n_hidden=0)


def test_zero_input_bias_free():
    net = build(SYN.replace(bias=False), seed=0)
    trace, stats = net.forward(SpikeRaster(np.zeros((64, 50), dtype=int)))
    assert not np.any(trace.values)
    assert not np.any(stats.totals)


def test_dimension_mismatch():
    net = build(SYN, seed=0)
    with pytest.raises(InvalidInputError):
        net.forward(np.zeros((10, 20)))


def test_temporal_memory_values():
    assert temporal_memory(PRESETS["heysnips"]) == 150
    assert temporal_memory(WaveSenseConfig(dilations=(1,))) == 2.5
    assert temporal_memory(PRESETS["aloha"]) == 140


def test_state_footprint():
    assert state_footprint(WaveSenseConfig(dilations=(16,))) == [(17, 3)]
    assert state_footprint(WaveSenseConfig(dilations=(1,))) == [(2, 3)]
    fp = state_footprint(PRESETS["heysnips"])
    assert sum(b for b, _ in fp) == 68 and sum(s for _, s in fp) == 24


def test_streaming_equivalence_bin_by_bin():
    net = build(SYN, seed=2)
    x = _raster(2, 60)
    whole, _ = net.forward(x)
    streamer = net.streamer()
    pieces = [streamer.feed(x[:, t:t + 1]) for t in range(x.shape[1])]
    assert np.array_equal(np.concatenate(pieces, axis=1), whole.values)


def test_streaming_equivalence_uneven_chunks():
    net = build(PRESETS["heysnips"], seed=3)
    x = _raster(3, 123)
    whole, _ = net.forward(x)
    streamer = net.streamer()
    cuts = [0, 7, 8, 50, 51, 99, 123]
    pieces = [streamer.feed(x[:, a:b]) for a, b in zip(cuts, cuts[1:])]
    assert np.array_equal(np.concatenate(pieces, axis=1), whole.values)


def test_residual_identity():
    net = build(SYN, seed=1)
    params = dict(net.params)
    for i in range(len(SYN.dilations)):
        params[f"blocks.{i}.fast.weight"] = np.zeros_like(params[f"blocks.{i}.fast.weight"])
        params[f"blocks.{i}.slow.weight"] = np.zeros_like(params[f"blocks.{i}.slow.weight"])
        params[f"blocks.{i}.layer1.bias"] = np.zeros_like(params[f"blocks.{i}.layer1.bias"])
    out = net.with_params(params).forward_batch(_raster(1)[None])
    names = out.layer_names
    for i in range(len(SYN.dilations)):
        assert not np.any(out.spikes[names.index(f"blocks.{i}.layer1")].value)
        assert not np.any(out.spikes[names.index(f"blocks.{i}.res")].value)


def test_residual_monotonicity():
    cfg = SYN
    net = build(cfg, seed=6)
    params = dict(net.params)
    params["input.weight"] = np.abs(params["input.weight"]) * 3
    for i in range(len(cfg.dilations)):
        for part in ("fast", "slow", "res"):
            params[f"blocks.{i}.{part}.weight"] = np.abs(params[f"blocks.{i}.{part}.weight"]) * 3
    out = net.with_params(params).forward_batch(_raster(6)[None])
    names = out.layer_names
    block_in = out.spikes[names.index("input")].value
    for i in range(len(cfg.dilations)):
        res = out.spikes[names.index(f"blocks.{i}.res")].value
        block_out = block_in + res
        assert np.all(block_out >= block_in)
        block_in = block_out
    assert block_in.sum() > out.spikes[0].value.sum()


def test_readout_linear_in_output_weights():
    net = build(SYN, seed=8, dtype=np.float64)
    x = _raster(8)[None]
    rng = np.random.default_rng(8)
    w1 = rng.normal(size=net.params["readout.weight"].shape)
    w2 = rng.normal(size=w1.shape)

    def trace(w):
        p = dict(net.params)
        p["readout.weight"], p["readout.bias"] = w, np.zeros_like(p["readout.bias"])
        return net.with_params(p).forward_batch(x).trace.value

    np.testing.assert_allclose(trace(w1 + 2 * w2), trace(w1) + 2 * trace(w2), atol=1e-9)


def test_single_strong_spike_response():
    cfg = PRESETS["heysnips"]
    net = build(cfg, seed=0, dtype=np.float64)
    base = np.zeros((64, 400), dtype=int)
    pert = base.copy()
    pert[:, 50] = 10
    y = net.forward(pert)[0].values
    dev = np.abs(y).max(axis=0)
    first = int(np.argmax(dev > 0))
    assert 50 <= first <= 50 + sum(cfg.dilations[:1]) + 10
    horizon = perturbation_horizon(net, base, pert, 50)
    assert horizon is not None and horizon < 400 - 50


def test_forward_helper_and_stats():
    net = build(SYN, seed=0)
    trace, stats = forward(net, SpikeRaster(_raster(0)))
    assert trace.values.shape == (SYN.n_classes, 80)
    assert len(stats.layer_names) == len(stats.layer_sizes) == stats.totals.shape[1]
    assert stats.n_neurons == parameter_count(SYN)["spiking_neurons"]


def test_param_validation():
    params = init_weights(SYN, 0)
    params.pop("hidden.bias")
    with pytest.raises(InvalidInputError):
        WaveSenseNet(SYN, params)
