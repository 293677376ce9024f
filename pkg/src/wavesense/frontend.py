"""Audio to spike rasters.

Pipeline: length standardization, optional noise mixing, peak normalization,
a Mel-spaced bank of second-order Butterworth bandpass sections, full-wave
rectification, a leak-free integrate-and-fire encoder per band, and binning
into 10 ms steps. Rasters serialize to the little-endian ``WSRAS1`` container.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .neuron import SpikeRaster
from .signal import InvalidInputError, InvalidParameterError

__all__ = [
    "FilterDesignError",
    "MixingError",
    "RasterFormatError",
    "Waveform",
    "BiquadBank",
    "hz_to_mel",
    "mel_to_hz",
    "design_filterbank",
    "apply_filterbank",
    "rectify",
    "encode_spikes",
    "bin_spikes",
    "noise_scale",
    "mix_noise",
    "standardize_length",
    "normalize_peak",
    "preprocess_waveform",
    "calibrate_gain",
    "write_raster",
    "read_raster",
    "DEFAULT_GAIN",
    "SAMPLE_RATE",
]

SAMPLE_RATE = 16000
# Top band edge is pulled below Nyquist by this factor when f_hi sits at fs/2.
NYQUIST_GUARD = 0.99
# Encoder gain giving ~300 spikes/s in the best channel for a full-scale 1 kHz tone
# with the default 64-band bank (see calibrate_gain).
DEFAULT_GAIN = 540.0
RASTER_MAGIC = b"WSRAS1"


class FilterDesignError(InvalidParameterError):
    pass


class MixingError(InvalidInputError):
    pass


class RasterFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1:
            raise InvalidInputError("waveform must be one-dimensional (mono)")
        if not np.all(np.isfinite(x)):
            raise InvalidInputError("waveform contains non-finite samples")
        if x.size and np.max(np.abs(x)) > 1.0 + 1e-9:
            raise InvalidInputError("waveform samples must lie in [-1, 1]")
        if self.sample_rate <= 0:
            raise InvalidInputError("sample_rate must be positive")
        object.__setattr__(self, "samples", x)

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class BiquadBank:
    """Second-order sections ``[n, 5]`` as ``(b0, b1, b2, a1, a2)`` with ``a0 = 1``."""

    coefficients: np.ndarray
    centers: np.ndarray
    edges: np.ndarray
    sample_rate: int

    def __len__(self):
        return len(self.centers)

    def ba(self, i: int):
        b0, b1, b2, a1, a2 = self.coefficients[i]
        return np.array([b0, b1, b2]), np.array([1.0, a1, a2])

    def poles(self) -> np.ndarray:
        return np.array([np.roots([1.0, a1, a2]) for a1, a2 in self.coefficients[:, 3:]])

    def is_stable(self) -> bool:
        return bool(np.all(np.abs(self.poles()) < 1.0))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def _bandpass_section(f1: float, f2: float, fs: float) -> np.ndarray:
    # first-order lowpass prototype -> bandpass, bilinear transform with pre-warped edges
    k = 2.0 * fs
    w1 = k * np.tan(np.pi * f1 / fs)
    w2 = k * np.tan(np.pi * f2 / fs)
    bw, w0sq = w2 - w1, w1 * w2
    a0 = k * k + bw * k + w0sq
    return np.array([bw * k / a0, 0.0, -bw * k / a0,
                     (2.0 * w0sq - 2.0 * k * k) / a0, (k * k - bw * k + w0sq) / a0])


def design_filterbank(n: int = 64, f_lo: float = 100.0, f_hi: float = 8000.0,
                      fs: int = SAMPLE_RATE) -> BiquadBank:
    """Mel-spaced bank of 2nd-order Butterworth bandpass sections.

    ``[mel(f_lo), mel(f_hi)]`` is cut into ``n`` equal Mel intervals; each
    interval is one band and its Mel midpoint is the band center. When
    ``f_hi`` equals the Nyquist frequency the top edge is pulled down to
    ``0.99 * fs / 2`` so the section stays realizable.
    """
    if n < 1:
        raise FilterDesignError("need at least one band")
    nyq = fs / 2.0
    if not 0 < f_lo < f_hi:
        raise FilterDesignError(f"need 0 < f_lo < f_hi, got {f_lo}, {f_hi}")
    if f_hi > nyq:
        raise FilterDesignError(f"f_hi = {f_hi} Hz exceeds the Nyquist frequency {nyq} Hz")
    mel_edges = np.linspace(hz_to_mel(f_lo), hz_to_mel(f_hi), n + 1)
    edges = mel_to_hz(mel_edges)
    edges[0], edges[-1] = f_lo, f_hi
    centers = mel_to_hz(0.5 * (mel_edges[:-1] + mel_edges[1:]))
    design_edges = edges.copy()
    design_edges[-1] = min(design_edges[-1], NYQUIST_GUARD * nyq)
    coeffs = []
    for i in range(n):
        lo, hi = design_edges[i], design_edges[i + 1]
        if not lo < hi or lo >= nyq:
            raise FilterDesignError(f"band {i} [{lo:.1f}, {hi:.1f}] Hz is infeasible at fs = {fs}")
        coeffs.append(_bandpass_section(lo, hi, fs))
    bank = BiquadBank(np.array(coeffs), centers, edges, int(fs))
    if not bank.is_stable():
        raise FilterDesignError("unstable section")
    return bank


def apply_filterbank(w: Waveform, bank: BiquadBank) -> np.ndarray:
    """Filter ``w`` through every section from zero state; returns ``[bands, samples]``."""
    if w.sample_rate != bank.sample_rate:
        raise InvalidInputError(
            f"sample rate mismatch: waveform {w.sample_rate} Hz, filterbank {bank.sample_rate} Hz"
        )
    out = np.empty((len(bank), w.samples.size))
    for i in range(len(bank)):
        b, a = bank.ba(i)
        out[i] = lfilter(b, a, w.samples)
    return out


def rectify(x) -> np.ndarray:
    return np.abs(np.asarray(x, dtype=np.float64))


def encode_spikes(channels, gain: float = DEFAULT_GAIN, theta: float = 1.0,
                  fs: int = SAMPLE_RATE) -> np.ndarray:
    """Leak-free integrate-and-fire at the audio rate.

    Each channel integrates ``v += gain * x[n] / fs`` and emits
    ``floor(v / theta)`` events, subtracting them from ``v``. Returns
    per-sample event counts ``[channels, samples]``.

    The running sum is integrated once and differenced after flooring, which
    equals the sequential subtractive rule exactly for non-negative input.
    """
    if not gain > 0:
        raise InvalidParameterError("gain must be positive")
    if not theta > 0:
        raise InvalidParameterError("theta must be positive")
    x = np.atleast_2d(np.asarray(channels, dtype=np.float64))
    if np.any(x < 0):
        raise InvalidInputError("encoder input must be rectified (non-negative)")
    level = np.floor(np.cumsum(x * (gain / fs), axis=1) / theta)
    counts = np.diff(level, axis=1, prepend=0.0)
    return counts.astype(np.int64)


def bin_spikes(events, bin_seconds: float = 0.01, fs: int = SAMPLE_RATE) -> SpikeRaster:
    """Sum per-sample event counts into ``bin_seconds`` windows.

    A trailing partial window becomes its own bin, so no event is dropped.
    """
    if not bin_seconds > 0:
        raise InvalidParameterError("bin width must be positive")
    ev = np.atleast_2d(np.asarray(events, dtype=np.int64))
    width = int(round(bin_seconds * fs))
    if width < 1:
        raise InvalidParameterError("bin narrower than one sample")
    n = ev.shape[1]
    if n == 0:
        return SpikeRaster(np.zeros((ev.shape[0], 0), dtype=np.int64), bin_seconds)
    starts = np.arange(0, n, width)
    return SpikeRaster(np.add.reduceat(ev, starts, axis=1), bin_seconds)


def _rms(x) -> float:
    return float(np.sqrt(np.mean(np.square(x)))) if np.size(x) else 0.0


def _fit_length(noise: np.ndarray, n: int, offset: int = 0) -> np.ndarray:
    if noise.size == 0:
        raise MixingError("empty noise clip")
    reps = -(-(offset % noise.size + n) // noise.size)
    return np.tile(noise, reps)[offset % noise.size: offset % noise.size + n]


def noise_scale(signal: Waveform, noise: Waveform, snr_db: float) -> float:
    """Factor ``k`` so that ``RMS(signal) / RMS(k * noise)`` equals ``snr_db`` in dB."""
    s, nz = _rms(signal.samples), _rms(noise.samples)
    if s == 0:
        raise MixingError("cannot mix noise into a silent signal")
    if nz == 0:
        raise MixingError("noise clip is silent")
    if np.isinf(snr_db) and snr_db > 0:
        return 0.0
    return s / (nz * 10.0 ** (snr_db / 20.0))


def mix_noise(signal: Waveform, noise: Waveform, snr_db: float = 5.0, offset: int = 0) -> Waveform:
    """Add noise at ``snr_db``; the noise is looped or cropped (from ``offset``) to fit.

    The mix is scaled down when needed so its peak stays within 1.
    ``snr_db = inf`` returns the signal itself.
    """
    if signal.sample_rate != noise.sample_rate:
        raise MixingError("signal and noise sample rates differ")
    fitted = Waveform(_fit_length(noise.samples, signal.samples.size, offset), noise.sample_rate)
    k = noise_scale(signal, fitted, snr_db)
    mixed = signal.samples + k * fitted.samples
    peak = np.max(np.abs(mixed)) if mixed.size else 0.0
    if peak > 1.0:
        mixed = mixed / peak
    return Waveform(mixed, signal.sample_rate)


def standardize_length(w: Waveform, seconds: float = 5.0) -> Waveform:
    """Center-pad with zeros or center-crop to exactly ``seconds``."""
    if not seconds > 0:
        raise InvalidParameterError("seconds must be positive")
    n = int(round(seconds * w.sample_rate))
    x = w.samples
    if x.size == n:
        return w
    if x.size < n:
        left = (n - x.size) // 2
        out = np.zeros(n)
        out[left:left + x.size] = x
    else:
        start = (x.size - n) // 2
        out = x[start:start + n].copy()
    return Waveform(out, w.sample_rate)


def normalize_peak(w: Waveform, peak: float = 0.95) -> Waveform:
    """Scale so ``max |x| = peak``; silence is returned unchanged."""
    m = np.max(np.abs(w.samples)) if w.samples.size else 0.0
    if m == 0:
        return w
    return Waveform(w.samples * (peak / m), w.sample_rate)


def preprocess_waveform(w: Waveform, bank: BiquadBank | None = None, *, seconds: float | None = 5.0,
                        noise: Waveform | None = None, snr_db: float = 5.0, noise_offset: int = 0,
                        gain: float = DEFAULT_GAIN, theta: float = 1.0,
                        bin_seconds: float = 0.01) -> SpikeRaster:
    """Full pipeline from a waveform to a ``[64, bins]`` raster."""
    bank = bank or design_filterbank(fs=w.sample_rate)
    if seconds is not None:
        w = standardize_length(w, seconds)
    if noise is not None:
        w = mix_noise(w, noise, snr_db, noise_offset)
    w = normalize_peak(w)
    rectified = rectify(apply_filterbank(w, bank))
    events = encode_spikes(rectified, gain, theta, w.sample_rate)
    return bin_spikes(events, bin_seconds, w.sample_rate)


def calibrate_gain(bank: BiquadBank | None = None, target_rate: float = 300.0,
                   freq: float = 1000.0, seconds: float = 1.0, theta: float = 1.0) -> float:
    """Gain that makes a full-scale tone at ``freq`` yield ``target_rate`` spikes/s in its best band."""
    bank = bank or design_filterbank()
    fs = bank.sample_rate
    t = np.arange(int(seconds * fs)) / fs
    y = rectify(apply_filterbank(Waveform(np.sin(2 * np.pi * freq * t), fs), bank))
    best = y.mean(axis=1).max()
    return target_rate * theta / best


_HEADER = struct.Struct("<IIf")


def write_raster(path, raster: SpikeRaster) -> None:
    counts = np.asarray(raster.counts)
    if counts.size and (counts.min() < 0 or counts.max() > 0xFFFF):
        raise RasterFormatError("counts must fit in an unsigned 16-bit integer")
    channels, bins = counts.shape
    payload = RASTER_MAGIC + _HEADER.pack(channels, bins, raster.dt) + counts.astype("<u2").tobytes()
    Path(path).write_bytes(payload)


def read_raster(path) -> SpikeRaster:
    data = Path(path).read_bytes()
    head = len(RASTER_MAGIC) + _HEADER.size
    if len(data) < head or not data.startswith(RASTER_MAGIC):
        raise RasterFormatError(f"{path}: not a WSRAS1 raster")
    channels, bins, dt = _HEADER.unpack_from(data, len(RASTER_MAGIC))
    expected = head + 2 * channels * bins
    if len(data) != expected:
        raise RasterFormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    counts = np.frombuffer(data, dtype="<u2", offset=head).reshape(channels, bins)
    # f32 on disk; keep the decimal value it was written from
    return SpikeRaster(counts.astype(np.int64), float(f"{dt:.7g}"))
