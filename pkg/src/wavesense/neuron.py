"""LIF neurons with multi-spike subtractive reset, simulated two ways.

``simulate_layer_stateful`` integrates the synaptic current and membrane
potential bin by bin. ``simulate_layer_srm`` builds the membrane from the
post-synaptic potential of the inputs plus the neuron's own refractory
response. Both follow the same discretization and therefore emit identical
spike rasters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .signal import InvalidInputError, InvalidParameterError, decay_factor, exp_filter

__all__ = [
    "SimulationDivergedError",
    "NeuronParams",
    "LayerState",
    "SpikeRaster",
    "spike_counts",
    "lif_step",
    "simulate_layer_stateful",
    "simulate_layer_srm",
]


class SimulationDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class NeuronParams:
    tau_s: float = 2.0
    tau_v: float = 2.0
    theta: float = 1.0

    def __post_init__(self):
        if not self.tau_s > 0 or not self.tau_v > 0:
            raise InvalidParameterError("time constants must be positive")
        if not self.theta > 0:
            raise InvalidParameterError("theta must be positive")

    @property
    def alpha_s(self) -> float:
        return decay_factor(self.tau_s)

    @property
    def alpha_v(self) -> float:
        return decay_factor(self.tau_v)


@dataclass
class LayerState:
    i_s: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros(cls, n: int, dtype=np.float64) -> "LayerState":
        return cls(np.zeros(n, dtype=dtype), np.zeros(n, dtype=dtype))


@dataclass
class SpikeRaster:
    """Integer spike counts, ``[channels, bins]``."""

    counts: np.ndarray
    dt: float = 0.01

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 2:
            raise InvalidInputError(f"raster must be 2-d [channels, bins], got shape {counts.shape}")
        if counts.size and (np.any(counts < 0) or np.any(counts != np.round(counts))):
            raise InvalidInputError("raster counts must be non-negative integers")
        self.counts = counts.astype(np.int64, copy=False)
        if not self.dt > 0:
            raise InvalidParameterError("dt must be positive")

    @property
    def n_channels(self) -> int:
        return self.counts.shape[0]

    @property
    def n_bins(self) -> int:
        return self.counts.shape[1]


def spike_counts(v, theta):
    """``floor(v / theta)`` where ``v >= theta``, zero elsewhere.

    The quotient is nudged by one where rounding in ``v / theta`` would
    leave the residual ``v - n * theta`` outside ``[0, theta)``.
    """
    n = np.maximum(np.floor(v / theta), 0)
    if not np.isfinite(theta):
        return n
    r = v - n * theta
    n = n + (r >= theta)
    return n - ((r < 0) & (n > 0))


def _subtract(v, n, theta):
    # theta = inf disables spiking; n * inf would be nan
    return v - n * theta if np.isfinite(theta) else v


def lif_step(state: LayerState, params: NeuronParams, weighted_input):
    """Advance one bin: inject, integrate, spike, subtract.

    Returns the new state and the per-neuron spike counts.
    """
    i_s, v = _integrate(state, params, weighted_input)
    theta = state.v.dtype.type(params.theta)
    n = spike_counts(v, theta)
    return LayerState(i_s, _subtract(v, n, theta)), n.astype(np.int64)


def _integrate(state, params, weighted_input):
    x = np.asarray(weighted_input, dtype=state.v.dtype)
    if x.shape != state.v.shape:
        raise InvalidInputError(f"input has shape {x.shape}, layer has {state.v.shape}")
    dtype = state.v.dtype.type
    i_s = dtype(params.alpha_s) * state.i_s + x
    v = dtype(params.alpha_v) * state.v + i_s
    if not np.all(np.isfinite(v)):
        raise SimulationDivergedError("membrane potential is not finite")
    return i_s, v


def _weighted_input(weights, raster, dtype):
    w = np.asarray(weights, dtype=dtype)
    counts = raster.counts if isinstance(raster, SpikeRaster) else np.asarray(raster)
    if w.ndim != 2 or counts.ndim != 2 or w.shape[1] != counts.shape[0]:
        raise InvalidInputError(
            f"weights {w.shape} do not match raster with {counts.shape[0]} channels"
        )
    return w @ counts.astype(dtype)


def simulate_layer_stateful(weights, params: NeuronParams, raster, *, dtype=np.float64,
                            return_membrane=False):
    """Run :func:`lif_step` over every bin of ``raster``.

    With ``return_membrane`` the pre-spike membrane trace ``[out, bins]`` is
    returned alongside the output raster.
    """
    drive = _weighted_input(weights, raster, dtype)
    n_out, n_bins = drive.shape
    state = LayerState.zeros(n_out, dtype)
    out = np.zeros((n_out, n_bins), dtype=np.int64)
    v_pre = np.zeros((n_out, n_bins), dtype=dtype)
    theta = dtype(params.theta)
    for t in range(n_bins):
        i_s, v = _integrate(state, params, drive[:, t])
        n = spike_counts(v, theta)
        state = LayerState(i_s, _subtract(v, n, theta))
        v_pre[:, t] = v
        out[:, t] = n
    dt = raster.dt if isinstance(raster, SpikeRaster) else 0.01
    result = SpikeRaster(out, dt)
    return (result, v_pre) if return_membrane else result


def simulate_layer_srm(weights, params: NeuronParams, raster, *, dtype=np.float64,
                       return_membrane=False):
    """Kernel formulation: ``v = sum_j w_j (eps * s_j) + (nu * s)``.

    The input PSP term does not depend on the output and is computed up front
    by two cascaded exponential filters. The refractory term needs the
    neuron's own past spikes, so it is accumulated bin by bin.
    """
    drive = _weighted_input(weights, raster, dtype)
    psp = exp_filter(exp_filter(drive, params.tau_s), params.tau_v)
    n_out, n_bins = drive.shape
    theta = dtype(params.theta)
    a_v = dtype(params.alpha_v)
    refractory = np.zeros(n_out, dtype=dtype)
    spiking = np.isfinite(theta)
    out = np.zeros((n_out, n_bins), dtype=np.int64)
    v_pre = np.zeros((n_out, n_bins), dtype=dtype)
    for t in range(n_bins):
        v = psp[:, t] - a_v * refractory
        if not np.all(np.isfinite(v)):
            raise SimulationDivergedError("membrane potential is not finite")
        n = spike_counts(v, theta)
        if spiking:
            refractory = a_v * refractory + theta * n
        v_pre[:, t] = v
        out[:, t] = n
    dt = raster.dt if isinstance(raster, SpikeRaster) else 0.01
    result = SpikeRaster(out, dt)
    return (result, v_pre) if return_membrane else result
