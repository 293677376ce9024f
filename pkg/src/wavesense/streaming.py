"""Clip classification and continuous-stream keyword detection metrics.

Detections fire on upward threshold crossings of the raw readout trace,
subject to a per-class lockout. False rejection rate (FRR) is the fraction
of labelled keywords without a matching detection; false alarms per hour
(FAPH) counts detections that match no label.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .losses import peak_logits
from .signal import InvalidInputError, InvalidParameterError

__all__ = [
    "Detection",
    "StreamLabel",
    "StreamResult",
    "SweepResult",
    "StreamDetector",
    "classify_clip",
    "detect_on_trace",
    "stream_evaluate",
    "stream_detect",
    "compute_frr_faph",
    "threshold_sweep",
    "read_stream_labels",
    "write_stream_labels",
    "DEFAULT_LOCKOUT",
    "DEFAULT_MATCH_WINDOW",
]

DEFAULT_LOCKOUT = 1.0
DEFAULT_MATCH_WINDOW = 0.75


@dataclass(frozen=True)
class Detection:
    cls: int
    time: float
    value: float


@dataclass(frozen=True)
class StreamLabel:
    cls: int
    start: float
    end: float

    def __post_init__(self):
        if not self.start < self.end:
            raise InvalidInputError(f"label needs start < end, got {self.start} >= {self.end}")


def classify_clip(network, raster) -> int:
    """Argmax over classes of the peak readout value; ties go to the lower class."""
    trace, _ = network.forward(raster)
    return int(np.argmax(peak_logits(trace).logits))


def _check_detect_args(threshold, lockout):
    if not math.isfinite(threshold):
        raise InvalidParameterError("threshold must be finite")
    if lockout < 0:
        raise InvalidParameterError("lockout must be >= 0")


class StreamDetector:
    """Crossing detector fed trace chunks ``[classes, bins]`` one after another.

    The trace value before the first bin is taken as 0. Also tracks the
    running per-class peak of everything seen.
    """

    def __init__(self, n_classes: int, threshold: float, lockout: float = DEFAULT_LOCKOUT,
                 dt: float = 0.01, classes=None):
        _check_detect_args(threshold, lockout)
        self.threshold = float(threshold)
        self.lockout = float(lockout)
        self.dt = float(dt)
        self.classes = list(range(n_classes)) if classes is None else sorted(set(classes))
        self.prev = np.zeros(n_classes)
        self.peaks = np.full(n_classes, -np.inf)
        self.last_bin = {c: None for c in self.classes}
        self.bins_seen = 0
        self.detections: list[Detection] = []

    def feed(self, chunk) -> list[Detection]:
        y = np.asarray(chunk, dtype=np.float64)
        if y.ndim != 2 or y.shape[0] != self.prev.shape[0]:
            raise InvalidInputError(f"expected chunk [{self.prev.shape[0]}, bins], got {y.shape}")
        if y.shape[1] == 0:
            return []
        self.peaks = np.maximum(self.peaks, y.max(axis=1))
        before = np.concatenate([self.prev[:, None], y[:, :-1]], axis=1)
        crossing = (before < self.threshold) & (y >= self.threshold)
        lock_bins = self.lockout / self.dt
        new = []
        for c in self.classes:
            for t in np.nonzero(crossing[c])[0]:
                b = self.bins_seen + int(t)
                last = self.last_bin[c]
                # small slack so a lockout that is a whole number of bins is not lost to rounding
                if last is not None and b - last < lock_bins - 1e-9:
                    continue
                self.last_bin[c] = b
                new.append(Detection(c, b * self.dt, float(y[c, t])))
        new.sort(key=lambda d: (d.time, d.cls))
        self.prev = y[:, -1].copy()
        self.bins_seen += y.shape[1]
        self.detections.extend(new)
        return new


def detect_on_trace(trace, threshold: float, lockout: float = DEFAULT_LOCKOUT, dt: float = 0.01,
                    classes=None) -> list[Detection]:
    """Detections on a complete ``[classes, bins]`` trace."""
    values = np.asarray(getattr(trace, "values", trace), dtype=np.float64)
    dt = getattr(trace, "dt", dt)
    det = StreamDetector(values.shape[0], threshold, lockout, dt, classes)
    det.feed(values)
    return det.detections


@dataclass
class StreamResult:
    detections: list
    peak_logits: np.ndarray
    trace: np.ndarray
    dt: float


def stream_evaluate(network, raster, threshold: float, lockout: float = DEFAULT_LOCKOUT,
                    chunk_bins: int = 100, classes=None) -> StreamResult:
    """Run the network incrementally over ``raster`` and detect on the fly."""
    counts = np.asarray(getattr(raster, "counts", raster))
    dt = float(getattr(raster, "dt", 0.01))
    if chunk_bins < 1:
        raise InvalidParameterError("chunk_bins must be >= 1")
    streamer = network.streamer()
    det = StreamDetector(network.config.n_classes, threshold, lockout, dt, classes)
    pieces = []
    for start in range(0, counts.shape[1], chunk_bins):
        y = streamer.feed(counts[:, start:start + chunk_bins])
        det.feed(y)
        pieces.append(y)
    trace = np.concatenate(pieces, axis=1) if pieces else np.zeros((network.config.n_classes, 0))
    return StreamResult(det.detections, det.peaks, trace, dt)


def stream_detect(network, raster, threshold: float, lockout: float = DEFAULT_LOCKOUT,
                  chunk_bins: int = 100, classes=None) -> list[Detection]:
    return stream_evaluate(network, raster, threshold, lockout, chunk_bins, classes).detections


def _matches(d: Detection, lab: StreamLabel, window: float) -> bool:
    return d.cls == lab.cls and lab.start - window <= d.time <= lab.end + window


def compute_frr_faph(detections, labels, stream_hours: float,
                     match_window: float = DEFAULT_MATCH_WINDOW) -> tuple[float, float]:
    """``(FRR, FAPH)``; FRR is 0 when there are no labels."""
    if not stream_hours > 0:
        raise InvalidParameterError("stream_hours must be positive")
    if match_window < 0:
        raise InvalidParameterError("match_window must be >= 0")
    labels = list(labels)
    hits = sum(any(_matches(d, lab, match_window) for d in detections) for lab in labels)
    false_alarms = sum(not any(_matches(d, lab, match_window) for lab in labels) for d in detections)
    frr = (len(labels) - hits) / len(labels) if labels else 0.0
    return frr, false_alarms / stream_hours


@dataclass
class SweepResult:
    threshold: float
    frr: float
    faph: float
    met: bool
    # (threshold, frr, faph) for every grid point, descending threshold
    table: list = field(default_factory=list)


def threshold_sweep(source, stream, labels, target_faph: float = 0.5, thresholds=None, *,
                    lockout: float = DEFAULT_LOCKOUT, match_window: float = DEFAULT_MATCH_WINDOW,
                    classes=None, n_grid: int = 101) -> SweepResult:
    """Sweep detection thresholds from strict to lenient.

    ``source`` is a network (run over ``stream`` once) or a precomputed
    ``[classes, bins]`` trace, in which case ``stream`` only supplies ``dt``
    and length. The default grid runs from just above the trace maximum down
    to its median. Returns the lowest FRR among thresholds with
    FAPH <= ``target_faph``; the highest such threshold wins ties. If none
    qualifies, the strictest threshold is reported with ``met=False``.
    """
    counts = getattr(stream, "counts", stream)
    dt = float(getattr(stream, "dt", 0.01))
    if hasattr(source, "forward_batch"):
        trace = stream_evaluate(source, stream, threshold=0.0, lockout=lockout).trace
    else:
        trace = np.asarray(getattr(source, "values", source), dtype=np.float64)
    n_bins = trace.shape[1] if counts is None else np.shape(counts)[-1]
    hours = n_bins * dt / 3600.0
    if classes is None:
        classes = sorted({lab.cls for lab in labels}) or None
    if thresholds is None:
        sel = trace if classes is None else trace[classes]
        # below the resting level (the median of a mostly idle stream) nothing crosses upward
        hi, lo = float(sel.max()), float(np.median(sel))
        span = max(hi - lo, 1e-12)
        thresholds = np.linspace(hi + 1e-3 * span, lo, n_grid)
    grid = sorted((float(t) for t in thresholds), reverse=True)
    if not grid:
        raise InvalidParameterError("threshold grid is empty")
    table = []
    for thr in grid:
        det = detect_on_trace(trace, thr, lockout, dt, classes)
        frr, faph = compute_frr_faph(det, labels, hours, match_window)
        table.append((thr, frr, faph))
    ok = [row for row in table if row[2] <= target_faph]
    if not ok:
        thr, frr, faph = table[0]
        return SweepResult(thr, frr, faph, False, table)
    best = min(ok, key=lambda row: row[1])
    return SweepResult(best[0], best[1], best[2], True, table)


def read_stream_labels(path) -> list[StreamLabel]:
    """Tab-separated ``class start end`` lines (seconds); ``#`` lines are skipped."""
    out = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        cols = line.split("\t") if "\t" in line else line.split()
        if len(cols) != 3:
            raise InvalidInputError(f"{path}:{lineno}: expected 'class start end'")
        try:
            out.append(StreamLabel(int(cols[0]), float(cols[1]), float(cols[2])))
        except ValueError as exc:
            raise InvalidInputError(f"{path}:{lineno}: {exc}") from None
    return out


def write_stream_labels(path, labels) -> None:
    Path(path).write_text("".join(f"{lab.cls}\t{lab.start:g}\t{lab.end:g}\n" for lab in labels))
