"""Reverse-mode differentiation over a time-unrolled spiking network.

The tape records coarse primitives that each span the whole sequence
(``[batch, time, channels]`` arrays): time-distributed affine maps, exponential
decay filters, and the LIF membrane/spike nonlinearity. Recursions over time
are differentiated with their adjoint recursions, which is backpropagation
through time without materialising per-bin graph nodes.

Spike counts are piecewise constant in the membrane potential; their local
derivative is replaced by :func:`surrogate_gradient`. The subtractive reset is
treated as a constant during the backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .neuron import spike_counts
from .signal import decay_filter, reverse_exp_filter

__all__ = [
    "TapeError",
    "Var",
    "Tape",
    "SurrogateParams",
    "surrogate_gradient",
    "affine",
    "add",
    "add_bias",
    "exp_filter_op",
    "lif",
    "mean",
    "weighted_sum",
    "backward",
    "relative_error",
    "check_gradients",
    "finite_diff_check",
]


class TapeError(RuntimeError):
    """Raised when ``backward`` is asked about something the tape never saw."""


class Var:
    __slots__ = ("value", "tape", "name")

    def __init__(self, value, tape: "Tape | None" = None, name: str | None = None):
        self.value = value
        self.tape = tape
        self.name = name

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        return f"Var(name={self.name!r}, shape={self.shape})"


@dataclass
class _Node:
    op: str
    inputs: tuple
    output: Var
    backward: Callable


class Tape:
    """Ordered record of the forward pass. Nodes only ever reference earlier outputs."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.params: dict[str, Var] = {}

    def param(self, name: str, value) -> Var:
        if name in self.params:
            raise TapeError(f"parameter {name!r} registered twice")
        var = Var(value, self, name)
        self.params[name] = var
        return var

    def record(self, op: str, inputs, value, backward) -> Var:
        out = Var(value, self)
        self.nodes.append(_Node(op, tuple(inputs), out, backward))
        return out


def _tape_of(*vars_):
    tape = None
    for v in vars_:
        if isinstance(v, Var) and v.tape is not None:
            if tape is not None and v.tape is not tape:
                raise TapeError("inputs recorded on different tapes")
            tape = v.tape
    return tape


def _value(x):
    return x.value if isinstance(x, Var) else x


def _emit(op, inputs, value, backward):
    tape = _tape_of(*inputs)
    if tape is None:
        return Var(value)
    return tape.record(op, inputs, value, backward)


@dataclass(frozen=True)
class SurrogateParams:
    theta: float = 1.0
    window: float = 0.3

    def __post_init__(self):
        if not self.window > 0:
            raise ValueError("learning window must be positive")
        if not self.theta > 0:
            raise ValueError("theta must be positive")


def surrogate_gradient(v, sp: SurrogateParams | None = None, *, theta=None, window=None):
    """Periodic exponential stand-in for ``d(spike count)/dv``.

    ``exp(-d(v) / (theta * window))`` with ``d`` the distance to the nearest
    positive multiple of ``theta`` for ``v > theta/2`` and ``theta - v`` below
    that, so the profile peaks at 1 on every multiple of the threshold and
    falls off monotonically for sub-threshold potentials.
    """
    if sp is None:
        sp = SurrogateParams(1.0 if theta is None else theta, 0.3 if window is None else window)
    v = np.asarray(v)
    th = sp.theta
    nearest = np.maximum(np.round(v / th), 1.0)
    dist = np.where(v > 0.5 * th, np.abs(v - nearest * th), th - v)
    g = np.exp(-dist / (th * sp.window))
    return g.astype(v.dtype, copy=False) if v.dtype.kind == "f" else g


# --- primitives --------------------------------------------------------------


def affine(x, w):
    """``y[b, t, o] = sum_i w[o, i] x[b, t, i]``.

    Uses einsum rather than matmul: its per-element reduction order does not
    depend on the batch or time extent, so chunked (streaming) evaluation is
    bit-identical to whole-sequence evaluation.
    """
    xv, wv = _value(x), _value(w)
    y = np.einsum("bti,oi->bto", xv, wv)

    def back(g):
        b, t, o = g.shape
        g2 = g.reshape(b * t, o)
        gx = (g2 @ wv).reshape(b, t, -1) if isinstance(x, Var) else None
        gw = g2.T @ xv.reshape(b * t, -1) if isinstance(w, Var) else None
        return gx, gw

    return _emit("affine", (x, w), y, back)


def add(*terms):
    value = _value(terms[0])
    for t in terms[1:]:
        value = value + _value(t)

    def back(g):
        return tuple(g for _ in terms)

    return _emit("add", terms, value, back)


def add_bias(x, b):
    """Broadcast ``b[o]`` over batch and time."""
    value = _value(x) + _value(b)

    def back(g):
        return g, g.sum(axis=(0, 1))

    return _emit("add_bias", (x, b), value, back)


def exp_filter_op(x, alpha: float, y0=None):
    """Exponential decay filter along axis 1 (time); ``y0`` is the carried state."""
    xv = _value(x)
    y = decay_filter(xv, alpha, y0, 1)

    def back(g):
        return (reverse_exp_filter(g, alpha, axis=1),)

    return _emit("exp_filter", (x,), y, back)


def lif(current, bias, alpha_v: float, theta: float, window: float = 0.3, v0=None,
        linear: bool = False, linear_gain: float = 1.0):
    """Membrane integration with multi-spike subtractive reset.

    ``current`` is the filtered synaptic current ``[batch, time, n]``; ``bias``
    a constant per-bin membrane drive ``[n]`` (or ``None``). Returns the spike
    count variable and the post-reset membrane after the last bin.

    With ``linear`` the layer emits ``linear_gain`` times its membrane
    potential instead of spikes and never resets; the whole network then is
    a linear time-invariant system, which is what gradient checks run against.
    """
    cur = _value(current)
    b = None if bias is None else _value(bias)
    dtype = cur.dtype.type
    batch, n_bins, n = cur.shape
    a = dtype(alpha_v)
    th = dtype(theta)
    v = np.zeros((batch, n), dtype=cur.dtype) if v0 is None else np.array(v0, dtype=cur.dtype)
    v_pre = np.empty_like(cur)
    if linear:
        for t in range(n_bins):
            v = a * v + cur[:, t]
            if b is not None:
                v = v + b
            v_pre[:, t] = v
        counts = v_pre * dtype(linear_gain)
    else:
        counts = np.empty_like(cur)
        for t in range(n_bins):
            v = a * v + cur[:, t]
            if b is not None:
                v = v + b
            v_pre[:, t] = v
            k = spike_counts(v, th).astype(v.dtype, copy=False)
            v = v - k * th
            counts[:, t] = k

    sp = None if linear else SurrogateParams(float(theta), window)

    def back(g):
        gv = g * linear_gain if linear else g * surrogate_gradient(v_pre, sp)
        gc = reverse_exp_filter(gv, alpha_v, axis=1)
        gb = gc.sum(axis=(0, 1)) if isinstance(bias, Var) else None
        return gc, gb

    return _emit("lif", (current, bias), counts, back), v


def mean(x):
    xv = _value(x)
    n = np.size(xv)

    def back(g):
        return (np.full(np.shape(xv), g / n, dtype=np.result_type(xv, float)),)

    return _emit("mean", (x,), np.mean(xv), back)


def weighted_sum(terms, weights):
    """``sum_k weights[k] * terms[k]`` for same-shaped terms."""
    weights = [float(w) for w in weights]
    value = sum(w * _value(t) for t, w in zip(terms, weights))

    def back(g):
        return tuple(w * g for w in weights)

    return _emit("weighted_sum", terms, value, back)


# --- reverse pass ------------------------------------------------------------


def backward(tape: Tape, loss: Var) -> dict[str, np.ndarray]:
    """Gradients of scalar ``loss`` for every parameter registered on ``tape``.

    Parameters that did not influence the loss get zero arrays.
    """
    if not isinstance(loss, Var) or loss.tape is not tape:
        raise TapeError("loss was not recorded on this tape")
    if not tape.nodes or np.ndim(loss.value) != 0:
        raise TapeError("backward needs a recorded scalar loss")
    if not np.isfinite(loss.value):
        raise TapeError("loss is not finite")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not isinstance(inp, Var) or inp.tape is not tape:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    out = {}
    for name, var in tape.params.items():
        g = grads.get(id(var))
        value = np.asarray(var.value)
        out[name] = np.zeros_like(value) if g is None else np.asarray(g, dtype=value.dtype).reshape(value.shape)
    return out


def relative_error(a, b, floor: float = 1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def check_gradients(loss_fn, params: dict[str, np.ndarray], eps: float = 1e-4,
                    fraction: float = 0.05, seed: int = 0, min_entries: int = 1):
    """Compare ``backward`` against central differences on a random parameter subset.

    ``loss_fn(params, tape)`` must build the loss on ``tape`` (or evaluate it
    without recording when ``tape`` is None) and return it. Returns
    ``(max_relative_error, report)`` where ``report`` lists
    ``(name, index, analytic, numeric)`` per checked entry.
    """
    if not 1e-6 <= eps <= 1e-2:
        raise ValueError("eps must lie in [1e-6, 1e-2]")
    tape = Tape()
    loss = loss_fn({k: tape.param(k, v) for k, v in params.items()}, tape)
    grads = backward(tape, loss)
    rng = np.random.default_rng(seed)
    flat = [(name, i) for name, v in params.items() for i in range(np.size(v))]
    n_pick = min(len(flat), max(min_entries, int(round(fraction * len(flat)))))
    picks = sorted(rng.choice(len(flat), size=n_pick, replace=False))
    report = []
    worst = 0.0
    for p in picks:
        name, i = flat[p]
        base = params[name]
        work = dict(params)
        values = []
        for sign in (1.0, -1.0):
            pert = base.copy()
            pert.flat[i] += sign * eps
            work[name] = pert
            values.append(float(_value(loss_fn(work, None))))
        numeric = (values[0] - values[1]) / (2 * eps)
        analytic = float(grads[name].flat[i])
        report.append((name, i, analytic, numeric))
        worst = max(worst, float(relative_error(analytic, numeric)))
    return worst, report


def finite_diff_check(network, sample, eps: float = 1e-4, *, fraction: float = 0.05,
                      seed: int = 0, alpha: float = 0.0, min_entries: int = 1):
    """Gradient check of a network's training loss on one ``(raster, label)`` sample.

    Meaningful only for a network in linear (sub-threshold) mode, where the
    loss is exactly differentiable; for a spiking network the surrogate is not
    the true derivative and the figure is informational.
    """
    from .losses import batch_loss

    raster, label = sample
    x = np.asarray(raster)[None] if np.ndim(raster) == 2 else np.asarray(raster)
    labels = np.atleast_1d(np.asarray(label))

    def loss_fn(params, tape):
        out = network.forward_batch(x, params=params)
        total, _ = batch_loss(out, labels, alpha)
        return total

    params = {k: v.copy() for k, v in network.params.items()}
    return check_gradients(loss_fn, params, eps, fraction, seed, min_entries)
