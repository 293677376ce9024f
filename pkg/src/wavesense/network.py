"""The WaveSense architecture.

An input spiking layer projects the input raster to ``n_channels_res``
channels. Each block then applies:

* layer 1: two synaptic projections of the block input, a fast one with
  ``tau_s`` and a slow one whose time constant equals the block's dilation;
* layer 2 (residual path) driven by layer 1; the block output is the block
  input raster plus layer-2 spikes;
* layer 3 (skip path) driven by layer 1.

All skip rasters are projected into one shared hidden spiking layer, whose
spikes feed a non-spiking low-pass readout. No layer buffers past activity;
all memory lives in synaptic and membrane state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .config import WaveSenseConfig
from .signal import InvalidInputError, decay_factor

__all__ = [
    "OutputTrace",
    "SpikeStats",
    "ForwardResult",
    "WaveSenseNet",
    "param_shapes",
    "parameter_count",
    "build",
    "forward",
    "temporal_memory",
    "state_footprint",
    "perturbation_horizon",
    "Streamer",
]


@dataclass(frozen=True)
class OutputTrace:
    """Readout traces ``[classes, bins]``."""

    values: np.ndarray
    dt: float = 0.01


@dataclass
class SpikeStats:
    layer_names: list
    layer_sizes: list
    # [batch, layer] total spike counts
    totals: np.ndarray
    # [batch] excess-spike counts over all layers
    excess: np.ndarray
    n_bins: int

    @property
    def n_neurons(self) -> int:
        return int(sum(self.layer_sizes))

    def rate_per_layer(self) -> np.ndarray:
        """Mean spikes per neuron per bin for each layer, averaged over the batch."""
        sizes = np.asarray(self.layer_sizes, dtype=np.float64)
        return self.totals.mean(axis=0) / (sizes * max(self.n_bins, 1))

    def excess_per_neuron_bin(self) -> np.ndarray:
        return self.excess / (self.n_neurons * max(self.n_bins, 1))


@dataclass
class ForwardResult:
    trace: ad.Var
    spikes: list
    layer_names: list
    state: dict = field(default_factory=dict)

    def stats(self) -> SpikeStats:
        values = [np.asarray(s.value) for s in self.spikes]
        totals = np.stack([v.sum(axis=(1, 2)) for v in values], axis=1)
        excess = sum((v * (v > 1)).sum(axis=(1, 2)) for v in values)
        return SpikeStats(list(self.layer_names), [v.shape[2] for v in values], totals,
                          np.asarray(excess), values[0].shape[1])


def param_shapes(cfg: WaveSenseConfig) -> dict:
    """Ordered ``name -> shape`` map of trainable tensors.

    Weight matrices are ``[out, in]``; biases are included when ``cfg.bias``.
    """
    res, skip = cfg.n_channels_res, cfg.n_channels_skip
    shapes = {"input.weight": (res, cfg.n_channels_in)}
    if cfg.bias:
        shapes["input.bias"] = (res,)
    for i in range(len(cfg.dilations)):
        p = f"blocks.{i}."
        shapes[p + "fast.weight"] = (res, res)
        shapes[p + "slow.weight"] = (res, res)
        if cfg.bias:
            shapes[p + "layer1.bias"] = (res,)
        shapes[p + "res.weight"] = (res, res)
        if cfg.bias:
            shapes[p + "res.bias"] = (res,)
        shapes[p + "skip.weight"] = (skip, res)
        if cfg.bias:
            shapes[p + "skip.bias"] = (skip,)
    shapes["hidden.weight"] = (cfg.n_hidden, skip)
    if cfg.bias:
        shapes["hidden.bias"] = (cfg.n_hidden,)
    shapes["readout.weight"] = (cfg.n_classes, cfg.n_hidden)
    if cfg.bias:
        shapes["readout.bias"] = (cfg.n_classes,)
    return shapes


def parameter_count(cfg: WaveSenseConfig) -> dict:
    shapes = param_shapes(cfg)
    weights = sum(int(np.prod(s)) for k, s in shapes.items() if k.endswith("weight"))
    biases = sum(int(np.prod(s)) for k, s in shapes.items() if k.endswith("bias"))
    n_neurons = (cfg.n_channels_res * (1 + 2 * len(cfg.dilations))
                 + cfg.n_channels_skip * len(cfg.dilations) + cfg.n_hidden)
    return {"weights": weights, "biases": biases, "total": weights + biases,
            "spiking_neurons": n_neurons}


def temporal_memory(cfg: WaveSenseConfig) -> float:
    """Effective history length in bins: 2.5 times the summed slow time constants."""
    return 2.5 * float(sum(cfg.dilations))


def state_footprint(cfg: WaveSenseConfig) -> list:
    """Per dilated layer: (values a dilated convolution must buffer, state values here).

    A kernel-size ``k`` convolution with dilation ``d`` keeps ``(k-1)*d + 1``
    past activations; the spiking layer only keeps ``k + 1`` state variables
    (one synaptic current per projection plus the membrane).
    """
    k = cfg.kernel_size
    return [((k - 1) * d + 1, k + 1) for d in cfg.dilations]


class WaveSenseNet:
    """A built network: config, parameter arrays and the forward pass.

    ``linear=True`` replaces every spike nonlinearity by its membrane
    potential (no threshold, no reset), which turns the network into an
    exactly differentiable linear system for gradient checking.
    """

    def __init__(self, config: WaveSenseConfig, params: dict, dtype=np.float32,
                 linear: bool = False):
        shapes = param_shapes(config)
        if set(params) != set(shapes):
            missing = sorted(set(shapes) - set(params))
            extra = sorted(set(params) - set(shapes))
            raise InvalidInputError(f"parameter mismatch: missing {missing}, unexpected {extra}")
        self.config = config
        self.dtype = np.dtype(dtype)
        self.linear = linear
        self.params = {}
        for name, shape in shapes.items():
            value = np.asarray(params[name], dtype=self.dtype)
            if value.shape != tuple(shape):
                raise InvalidInputError(f"{name}: expected shape {shape}, got {value.shape}")
            self.params[name] = value
        cfg = config
        self.alpha_s = decay_factor(cfg.tau_s)
        self.alpha_v = decay_factor(cfg.tau_v)
        self.alpha_slow = [decay_factor(d) for d in cfg.dilations]
        self.alpha_lp = decay_factor(cfg.readout_tau)
        # unit DC gain per layer in linear mode, so activity does not compound with depth
        self.linear_gain = (1 - self.alpha_s) * (1 - self.alpha_v)

    def with_params(self, params: dict) -> "WaveSenseNet":
        return WaveSenseNet(self.config, params, self.dtype, self.linear)

    def astype(self, dtype, linear: bool | None = None) -> "WaveSenseNet":
        return WaveSenseNet(self.config, self.params, dtype,
                            self.linear if linear is None else linear)

    @property
    def layer_names(self) -> list:
        names = ["input"]
        for i in range(len(self.config.dilations)):
            names += [f"blocks.{i}.layer1", f"blocks.{i}.res", f"blocks.{i}.skip"]
        names.append("hidden")
        return names

    def _prepare_input(self, counts):
        x = np.asarray(counts)
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3 or x.shape[1] != self.config.n_channels_in:
            raise InvalidInputError(
                f"expected input [batch, {self.config.n_channels_in}, bins], got {np.shape(counts)}"
            )
        return np.ascontiguousarray(np.swapaxes(x, 1, 2), dtype=self.dtype)

    def forward_batch(self, counts, params: dict | None = None, state: dict | None = None):
        """Run ``[batch, channels, bins]`` counts through the network.

        ``params`` may hold tape variables (to record for backprop) or plain
        arrays; it defaults to the network's own parameters. ``state`` carries
        synaptic and membrane state from a previous call; the returned
        :class:`ForwardResult` holds the state after the last bin.
        """
        p = self.params if params is None else params
        cfg = self.config
        x = self._prepare_input(counts)
        state = state or {}
        new_state = {}
        spikes = []
        theta, window, linear = cfg.threshold, cfg.learning_window, self.linear

        def bias(name):
            return p.get(name) if cfg.bias else None

        def synapse(key, inp, weight, alpha):
            out = ad.exp_filter_op(ad.affine(inp, weight), alpha, state.get(key))
            new_state[key] = np.asarray(out.value)[:, -1]
            return out

        def neurons(key, current, b):
            s, v = ad.lif(current, b, self.alpha_v, theta, window, state.get(key), linear,
                          self.linear_gain)
            new_state[key] = v
            spikes.append(s)
            return s

        cur = synapse("input.syn", x, p["input.weight"], self.alpha_s)
        h = neurons("input.mem", cur, bias("input.bias"))
        skip_sum = None
        for i, a_slow in enumerate(self.alpha_slow):
            pre = f"blocks.{i}."
            fast = synapse(pre + "fast.syn", h, p[pre + "fast.weight"], self.alpha_s)
            slow = synapse(pre + "slow.syn", h, p[pre + "slow.weight"], a_slow)
            s1 = neurons(pre + "layer1.mem", ad.add(fast, slow), bias(pre + "layer1.bias"))
            s2 = neurons(pre + "res.mem",
                         synapse(pre + "res.syn", s1, p[pre + "res.weight"], self.alpha_s),
                         bias(pre + "res.bias"))
            s3 = neurons(pre + "skip.mem",
                         synapse(pre + "skip.syn", s1, p[pre + "skip.weight"], self.alpha_s),
                         bias(pre + "skip.bias"))
            h = ad.add(h, s2)
            skip_sum = s3 if skip_sum is None else ad.add(skip_sum, s3)
        hid = neurons("hidden.mem",
                      synapse("hidden.syn", skip_sum, p["hidden.weight"], self.alpha_s),
                      bias("hidden.bias"))
        drive = ad.affine(hid, p["readout.weight"])
        if cfg.bias:
            drive = ad.add_bias(drive, p["readout.bias"])
        y = ad.exp_filter_op(drive, self.alpha_lp, state.get("readout"))
        new_state["readout"] = np.asarray(y.value)[:, -1]
        return ForwardResult(y, spikes, self.layer_names, new_state)

    def forward(self, raster, dt: float = 0.01):
        """Single-raster forward: ``[channels, bins]`` in, (:class:`OutputTrace`, :class:`SpikeStats`) out."""
        counts = getattr(raster, "counts", raster)
        dt = getattr(raster, "dt", dt)
        out = self.forward_batch(np.asarray(counts)[None])
        return OutputTrace(np.asarray(out.trace.value)[0].T.copy(), dt), out.stats()

    def streamer(self, batch: int = 1) -> "Streamer":
        return Streamer(self, batch)


class Streamer:
    """Incremental evaluation with carried state.

    Feeding a raster chunk by chunk (down to one bin at a time) yields exactly
    the traces of a single whole-raster forward pass.
    """

    def __init__(self, net: WaveSenseNet, batch: int = 1):
        self.net = net
        self.batch = batch
        self.state: dict = {}
        self.bins_seen = 0

    def reset(self):
        self.state = {}
        self.bins_seen = 0

    def feed(self, counts) -> np.ndarray:
        """Consume ``[channels, bins]`` (or batched) counts; return the trace chunk ``[classes, bins]``."""
        counts = np.asarray(counts)
        single = counts.ndim == 2
        out = self.net.forward_batch(counts[None] if single else counts, state=self.state)
        self.state = out.state
        self.bins_seen += counts.shape[-1]
        y = np.swapaxes(np.asarray(out.trace.value), 1, 2)
        return y[0] if single else y


def perturbation_horizon(network: WaveSenseNet, base, perturbed, onset: int,
                         tol: float = 0.01) -> int | None:
    """Bins from ``onset`` until the readout deviation stays below ``tol`` of its peak.

    The deviation is the largest absolute difference over classes between the
    traces for ``perturbed`` and ``base`` input. Returns ``None`` when the
    perturbation leaves the readout unchanged.
    """
    y_base = network.forward(base)[0].values
    y_pert = network.forward(perturbed)[0].values
    dev = np.abs(y_pert - y_base).max(axis=0)
    peak = dev.max()
    if peak == 0:
        return None
    above = np.nonzero(dev >= tol * peak)[0]
    return int(above.max() - onset + 1)


def build(config: WaveSenseConfig, seed: int = 0, dtype=np.float32, linear: bool = False):
    """Construct a network with freshly initialized weights."""
    from .trainer import init_weights

    return WaveSenseNet(config, init_weights(config, seed), dtype, linear)


def forward(network: WaveSenseNet, raster):
    return network.forward(raster)
