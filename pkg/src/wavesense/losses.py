"""Peak cross-entropy over readout traces and the spiking-activity regularizer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Var, _emit, _value, add, mean, weighted_sum
from .signal import InvalidInputError, softmax

__all__ = [
    "DEFAULT_ALPHA",
    "PeakResult",
    "peak_logits",
    "cross_entropy",
    "activity_excess",
    "activity_loss",
    "total_loss",
    "peak_op",
    "cross_entropy_op",
    "activity_op",
    "batch_loss",
]

DEFAULT_ALPHA = 0.01


@dataclass(frozen=True)
class PeakResult:
    logits: np.ndarray
    peak_times: np.ndarray


def _trace_values(trace):
    values = getattr(trace, "values", trace)
    return np.asarray(values, dtype=np.float64)


def peak_logits(trace) -> PeakResult:
    """Per-class maximum of a ``[classes, bins]`` trace and the bin where it occurs.

    Ties resolve to the earliest bin.
    """
    y = _trace_values(trace)
    if y.ndim != 2 or y.shape[1] == 0:
        raise InvalidInputError("trace must be a non-empty [classes, bins] array")
    t_star = np.argmax(y, axis=1)
    return PeakResult(y[np.arange(y.shape[0]), t_star], t_star)


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits, label: int) -> float:
    """``-log softmax(logits)[label]``."""
    z = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < z.shape[-1]:
        raise InvalidInputError(f"label {label} out of range for {z.shape[-1]} classes")
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("logits must be finite")
    return float(-_log_softmax(z)[label])


def activity_excess(rasters) -> int:
    """Spikes in bins where a neuron fired more than once; a lone spike is free.

    A bin holding ``N >= 2`` spikes contributes all ``N`` of them.
    """
    total = 0
    for r in rasters:
        counts = np.asarray(getattr(r, "counts", r))
        total += int(np.sum(counts * (counts > 1)))
    return total


def activity_loss(n_excess, n_bins: int, n_neurons: int) -> float:
    if n_bins <= 0 or n_neurons <= 0:
        raise InvalidInputError("n_bins and n_neurons must be positive")
    return (n_excess / (n_bins * n_neurons)) ** 2


def total_loss(trace, label: int, rasters, alpha: float = DEFAULT_ALPHA) -> float:
    if alpha < 0:
        raise InvalidInputError("alpha must be non-negative")
    rasters = [np.asarray(getattr(r, "counts", r)) for r in rasters]
    ce = cross_entropy(peak_logits(trace).logits, label)
    if not rasters:
        return ce
    n_neurons = sum(r.shape[0] for r in rasters)
    n_bins = rasters[0].shape[1]
    return ce + alpha * activity_loss(activity_excess(rasters), n_bins, n_neurons)


# --- differentiable versions over [batch, time, channels] variables -----------


def peak_op(trace):
    """Batched peak selection; gradient flows only into the selected bins."""
    y = _value(trace)
    t_star = np.argmax(y, axis=1)
    b_idx, c_idx = np.indices(t_star.shape)
    logits = y[b_idx, t_star, c_idx]

    def back(g):
        gy = np.zeros(y.shape, dtype=np.result_type(y, g))
        gy[b_idx, t_star, c_idx] = g
        return (gy,)

    out = _emit("peak", (trace,), logits, back)
    return out, t_star


def cross_entropy_op(logits, labels):
    z = np.asarray(_value(logits), dtype=np.float64)
    labels = np.asarray(labels)
    if np.any(labels < 0) or np.any(labels >= z.shape[-1]):
        raise InvalidInputError("label out of range")
    rows = np.arange(z.shape[0])
    ce = -_log_softmax(z)[rows, labels]

    def back(g):
        p = softmax(z)
        p[rows, labels] -= 1.0
        return (p * g[:, None],)

    return _emit("cross_entropy", (logits,), ce, back)


def activity_op(spikes, n_bins: int):
    """Per-sample activity loss over a list of ``[batch, time, n]`` spike variables."""
    values = [_value(s) for s in spikes]
    n_neurons = sum(v.shape[2] for v in values)
    masks = [v > 1 for v in values]
    excess = sum((v * m).sum(axis=(1, 2)) for v, m in zip(values, masks))
    scale = 1.0 / (n_bins * n_neurons)
    loss = (excess * scale) ** 2

    def back(g):
        coeff = g * 2.0 * excess * scale * scale
        return tuple(m * coeff[:, None, None] for m in masks)

    return _emit("activity", tuple(spikes), loss, back)


def batch_loss(out, labels, alpha: float = DEFAULT_ALPHA):
    """Mean over the batch of ``CE(peak logits) + alpha * L_act``.

    ``out`` is a network forward result with ``trace`` and ``spikes``
    variables. Returns the scalar loss variable and a dict of per-sample
    diagnostics.
    """
    logits, t_star = peak_op(out.trace)
    ce = cross_entropy_op(logits, labels)
    act = activity_op(out.spikes, out.trace.shape[1])
    per_sample = weighted_sum([ce, act], [1.0, alpha]) if alpha else add(ce)
    info = {
        "logits": np.asarray(logits.value),
        "peak_times": t_star,
        "ce": np.asarray(ce.value),
        "activity": np.asarray(act.value),
    }
    return mean(per_sample), info
