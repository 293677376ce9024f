"""Discrete-time primitives: exponential decay filters, kernels, causal convolution, softmax.

All time constants are expressed in bins. A first-order exponential with time
constant ``tau`` is discretized as ``y[t] = exp(-1/tau) * y[t-1] + x[t]``, i.e.
an input arriving in bin ``t`` is visible in the same bin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter

__all__ = [
    "InvalidParameterError",
    "InvalidInputError",
    "TimeSeries",
    "Kernel",
    "KERNEL_KINDS",
    "decay_factor",
    "decay_filter",
    "exp_filter",
    "reverse_exp_filter",
    "exp_kernel",
    "psp_kernel",
    "refractory_kernel",
    "default_kernel_length",
    "causal_convolve",
    "softmax",
]

KERNEL_KINDS = ("synaptic", "membrane", "psp", "refractory")


class InvalidParameterError(ValueError):
    pass


class InvalidInputError(ValueError):
    pass


@dataclass(frozen=True)
class TimeSeries:
    values: np.ndarray
    dt: float = 0.01

    def __post_init__(self):
        if not self.dt > 0:
            raise InvalidParameterError(f"dt must be positive, got {self.dt}")
        object.__setattr__(self, "values", np.asarray(self.values))

    def __len__(self):
        return self.values.shape[-1]


@dataclass(frozen=True)
class Kernel:
    taps: np.ndarray
    kind: str

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise InvalidParameterError(f"unknown kernel kind {self.kind!r}")
        taps = np.asarray(self.taps, dtype=np.float64)
        if taps.ndim != 1 or taps.size == 0:
            raise InvalidParameterError("kernel taps must be a non-empty 1-d sequence")
        if self.kind == "refractory":
            if np.any(taps > 0):
                raise InvalidParameterError("refractory taps must be <= 0")
        elif np.any(taps < 0):
            raise InvalidParameterError(f"{self.kind} taps must be >= 0")
        object.__setattr__(self, "taps", taps)

    def __len__(self):
        return self.taps.size


def _check_tau(tau, name="tau"):
    if not (isinstance(tau, (int, float, np.floating, np.integer)) and tau > 0):
        raise InvalidParameterError(f"{name} must be a positive number of bins, got {tau!r}")


def decay_factor(tau: float) -> float:
    """Per-bin decay ``exp(-1/tau)`` of an exponential with time constant ``tau`` bins."""
    _check_tau(tau)
    return math.exp(-1.0 / tau)


def decay_filter(x, alpha: float, zi=None, axis: int = -1):
    """``y[t] = alpha * y[t-1] + x[t]`` along ``axis`` with ``y[-1] = zi`` (default 0)."""
    x = np.asarray(x)
    dtype = x.dtype if x.dtype in (np.float32, np.float64) else np.float64
    x = x.astype(dtype, copy=False)
    b = np.array([1.0], dtype=dtype)
    a = np.array([1.0, -alpha], dtype=dtype)
    if zi is None:
        return lfilter(b, a, x, axis=axis)
    # lfilter's single delay register holds a * y[t-1]
    zi = np.expand_dims(np.asarray(zi, dtype=dtype) * dtype.type(alpha), axis)
    return lfilter(b, a, x, axis=axis, zi=zi)[0]


def exp_filter(x, tau: float, axis: int = -1, y0=None):
    """Causal recursive exponential filter ``y[t] = a*y[t-1] + x[t]`` along ``axis``.

    ``x`` may be a :class:`TimeSeries` or an array; the return type follows the
    input. ``y0`` is the filter output of the bin preceding ``x[0]`` (zero when
    omitted) and lets a long signal be filtered in consecutive chunks with
    bit-identical results.
    """
    alpha = decay_factor(tau)
    if isinstance(x, TimeSeries):
        return TimeSeries(decay_filter(x.values, alpha, y0, axis), x.dt)
    return decay_filter(x, alpha, y0, axis)


def reverse_exp_filter(g, alpha: float, axis: int = -1):
    """Adjoint of :func:`exp_filter`: ``r[t] = g[t] + a*r[t+1]``."""
    g = np.flip(np.asarray(g), axis=axis)
    return np.flip(decay_filter(g, alpha, None, axis), axis=axis)


def default_kernel_length(*taus: float) -> int:
    """Truncation length ``ceil(40 * max(tau))``; the dropped tail is < 1e-6 of the mass."""
    for tau in taus:
        _check_tau(tau)
    return int(math.ceil(40 * max(taus)))


def exp_kernel(tau: float, length: int | None = None, kind: str = "synaptic") -> Kernel:
    _check_tau(tau)
    if length is None:
        length = default_kernel_length(tau)
    if length < 1:
        raise InvalidParameterError("kernel length must be >= 1")
    return Kernel(decay_factor(tau) ** np.arange(length), kind)


def psp_kernel(tau_s: float, tau_v: float, length: int | None = None) -> Kernel:
    """Post-synaptic potential kernel: discrete convolution of synaptic and membrane exponentials.

    For ``tau_s == tau_v`` the taps reduce to ``(t + 1) * a**t``.
    """
    _check_tau(tau_s, "tau_s")
    _check_tau(tau_v, "tau_v")
    if length is None:
        length = default_kernel_length(tau_s, tau_v)
    if not isinstance(length, (int, np.integer)) or length < 1:
        raise InvalidParameterError("kernel length must be a positive integer")
    eps_s = decay_factor(tau_s) ** np.arange(length)
    eps_v = decay_factor(tau_v) ** np.arange(length)
    return Kernel(np.convolve(eps_s, eps_v)[:length], "psp")


def refractory_kernel(theta: float, tau_v: float, length: int | None = None) -> Kernel:
    """Refractory kernel ``-theta * exp(-t/tau_v)``."""
    if not theta > 0:
        raise InvalidParameterError("theta must be positive")
    k = exp_kernel(tau_v, length, kind="membrane")
    return Kernel(-theta * k.taps, "refractory")


def causal_convolve(x, k) -> np.ndarray:
    """``y[t] = sum_{u <= min(t, len(k)-1)} k[u] * x[t-u]``, same length as ``x``.

    Direct summation, kept deliberately simple; it is the reference the
    recursive filters are checked against.
    """
    taps = k.taps if isinstance(k, Kernel) else np.asarray(k, dtype=np.float64)
    if taps.size == 0:
        raise InvalidParameterError("kernel must be non-empty")
    values = x.values if isinstance(x, TimeSeries) else x
    values = np.asarray(values, dtype=np.float64)
    n = values.shape[-1]
    y = np.zeros_like(values)
    for u in range(min(n, taps.size)):
        y[..., u:] += taps[u] * values[..., : n - u]
    if isinstance(x, TimeSeries):
        return TimeSeries(y, x.dt)
    return y


def softmax(logits, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax; rejects non-finite logits."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("logits must be finite")
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)
