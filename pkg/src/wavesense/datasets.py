"""Manifests, WAV ingestion, noise pools, raster datasets and a synthetic task.

A dataset directory holds ``manifest.tsv`` plus one ``.wsras`` raster per
sample. Manifest lines are tab separated::

    path<TAB>label<TAB>split[<TAB>duration-seconds]

Paths are relative to the manifest. ``#`` lines are comments.
"""

from __future__ import annotations

import logging
import warnings
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .frontend import (SAMPLE_RATE, Waveform, design_filterbank, preprocess_waveform, read_raster,
                       write_raster)
from .neuron import SpikeRaster
from .signal import InvalidInputError, InvalidParameterError
from .trainer import Split

__all__ = [
    "SPLITS",
    "ManifestError",
    "WavFormatError",
    "ManifestWarning",
    "ManifestEntry",
    "load_manifest",
    "write_manifest",
    "read_wav",
    "write_wav",
    "NoisePool",
    "SyntheticSpec",
    "SyntheticDataset",
    "template_difference",
    "synth_keyword_dataset",
    "write_dataset",
    "load_dataset",
    "preprocess_manifest",
    "compose_stream",
]

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
MANIFEST_NAME = "manifest.tsv"


class ManifestError(ValueError):
    pass


class WavFormatError(ValueError):
    pass


class ManifestWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    label: int
    split: str
    duration: float | None = None


def load_manifest(path, n_classes: int | None = None) -> list[ManifestEntry]:
    """Parse a manifest; relative paths resolve against its directory.

    Missing files do not abort parsing; they are reported in one
    :class:`ManifestWarning`.
    """
    path = Path(path)
    base = path.parent
    entries, missing = [], []
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        cols = raw.rstrip("\n").split("\t")
        where = f"{path}:{lineno}"
        if len(cols) not in (3, 4):
            raise ManifestError(f"{where}: expected 3 or 4 tab-separated columns, got {len(cols)}")
        rel, label_s, split = (c.strip() for c in cols[:3])
        try:
            label = int(label_s)
        except ValueError:
            raise ManifestError(f"{where}: label {label_s!r} is not an integer") from None
        if label < 0 or (n_classes is not None and label >= n_classes):
            raise ManifestError(f"{where}: label {label} out of range")
        if split not in SPLITS:
            raise ManifestError(f"{where}: unknown split {split!r} (expected one of {SPLITS})")
        duration = None
        if len(cols) == 4 and cols[3].strip():
            try:
                duration = float(cols[3])
            except ValueError:
                raise ManifestError(f"{where}: bad duration {cols[3]!r}") from None
        p = Path(rel)
        p = p if p.is_absolute() else base / p
        if not p.exists():
            missing.append(str(p))
        entries.append(ManifestEntry(p, label, split, duration))
    if missing:
        warnings.warn(f"{len(missing)} manifest file(s) missing: {missing[:5]}", ManifestWarning,
                      stacklevel=2)
    return entries


def write_manifest(path, entries) -> None:
    path = Path(path)
    lines = []
    for e in entries:
        p = Path(e.path)
        try:
            p = p.relative_to(path.parent)
        except ValueError:
            pass
        row = [p.as_posix(), str(e.label), e.split]
        if e.duration is not None:
            row.append(f"{e.duration:g}")
        lines.append("\t".join(row))
    path.write_text("".join(line + "\n" for line in lines))


def read_wav(path) -> Waveform:
    """16-bit PCM mono 16 kHz WAV, scaled by 1/32768."""
    try:
        with wave.open(str(path), "rb") as fh:
            if fh.getcomptype() != "NONE":
                raise WavFormatError(f"{path}: PCM required, got codec {fh.getcomptype()!r}")
            if fh.getsampwidth() != 2:
                raise WavFormatError(f"{path}: 16-bit samples required, got {8 * fh.getsampwidth()}-bit")
            if fh.getnchannels() != 1:
                raise WavFormatError(f"{path}: mono required, got {fh.getnchannels()} channels")
            if fh.getframerate() != SAMPLE_RATE:
                raise WavFormatError(f"{path}: sample rate {SAMPLE_RATE} Hz required, "
                                     f"got {fh.getframerate()} Hz")
            frames = fh.readframes(fh.getnframes())
    except wave.Error as exc:
        raise WavFormatError(f"{path}: not a PCM WAV file ({exc})") from None
    samples = np.frombuffer(frames, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, SAMPLE_RATE)


def write_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(pcm.tobytes())


class NoisePool:
    """All WAV files below a directory, drawn uniformly at random."""

    def __init__(self, root):
        self.paths = sorted(Path(root).rglob("*.wav"))
        if not self.paths:
            raise InvalidInputError(f"no WAV files under {root}")
        self._cache: dict = {}

    def __len__(self):
        return len(self.paths)

    def draw(self, rng: np.random.Generator) -> tuple[Waveform, int]:
        """A random clip and a random start offset into it."""
        path = self.paths[int(rng.integers(len(self.paths)))]
        if path not in self._cache:
            self._cache[path] = read_wav(path)
        clip = self._cache[path]
        return clip, int(rng.integers(max(clip.samples.size, 1)))


# --- synthetic spike-pattern task ---------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the synthetic keyword task.

    Each class has a fixed random template (``density`` of the cells active,
    1 to ``max_count`` spikes each). Samples keep every template spike with
    probability ``keep_prob``, shift it by up to ``jitter`` bins, and add
    Poisson background at ``noise_rate`` spikes per channel-bin.
    """

    n_classes: int = 4
    channels: int = 64
    bins: int = 100
    density: float = 0.1
    jitter: int = 2
    noise_rate: float = 0.1
    keep_prob: float = 0.8
    max_count: int = 4
    samples_per_class: int = 100
    min_difference: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.density < 1:
            raise InvalidParameterError("density must lie in (0, 1)")
        if self.jitter < 0:
            raise InvalidParameterError("jitter must be >= 0")
        if self.noise_rate < 0:
            raise InvalidParameterError("noise_rate must be >= 0")
        if not 0 < self.keep_prob <= 1:
            raise InvalidParameterError("keep_prob must lie in (0, 1]")
        if min(self.n_classes, self.channels, self.bins, self.max_count, self.samples_per_class) < 1:
            raise InvalidParameterError("sizes must be positive")


@dataclass
class SyntheticDataset:
    spec: SyntheticSpec
    templates: np.ndarray
    splits: dict = field(default_factory=dict)

    @property
    def train(self) -> Split:
        return self.splits["train"]

    @property
    def val(self) -> Split:
        return self.splits["val"]

    @property
    def test(self) -> Split:
        return self.splits["test"]


def template_difference(a, b) -> float:
    """Fraction of the union of active cells that is active in only one pattern."""
    a, b = np.asarray(a) > 0, np.asarray(b) > 0
    union = np.count_nonzero(a | b)
    return np.count_nonzero(a ^ b) / union if union else 0.0


def _templates(spec: SyntheticSpec, rng) -> np.ndarray:
    shape = (spec.channels, spec.bins)
    out = []
    for _ in range(1000 * spec.n_classes):
        if len(out) == spec.n_classes:
            break
        active = rng.random(shape) < spec.density
        t = active * rng.integers(1, spec.max_count + 1, size=shape)
        if np.any(t) and all(template_difference(t, o) >= spec.min_difference for o in out):
            out.append(t)
    if len(out) < spec.n_classes:
        raise InvalidParameterError("could not draw sufficiently distinct templates; raise density")
    return np.stack(out).astype(np.int64)


def _sample(template, spec: SyntheticSpec, rng) -> np.ndarray:
    ch, t = np.nonzero(template)
    reps = template[ch, t]
    ch, t = np.repeat(ch, reps), np.repeat(t, reps)
    keep = rng.random(ch.size) < spec.keep_prob
    ch, t = ch[keep], t[keep]
    if spec.jitter:
        t = t + rng.integers(-spec.jitter, spec.jitter + 1, size=t.size)
    inside = (t >= 0) & (t < spec.bins)
    out = np.zeros_like(template)
    np.add.at(out, (ch[inside], t[inside]), 1)
    if spec.noise_rate:
        out += rng.poisson(spec.noise_rate, size=out.shape)
    return out


def synth_keyword_dataset(spec: SyntheticSpec = SyntheticSpec()) -> SyntheticDataset:
    """Seed-deterministic synthetic dataset with a stratified 80/10/10 split."""
    tmpl_seq, sample_seq, split_seq = np.random.SeedSequence(spec.seed).spawn(3)
    templates = _templates(spec, np.random.default_rng(tmpl_seq))
    rng = np.random.default_rng(sample_seq)
    n = spec.samples_per_class
    x = np.stack([_sample(templates[c], spec, rng) for c in range(spec.n_classes) for _ in range(n)])
    y = np.repeat(np.arange(spec.n_classes), n)
    split_rng = np.random.default_rng(split_seq)
    n_train, n_val = int(round(0.8 * n)), int(round(0.1 * n))
    parts = {s: [] for s in SPLITS}
    for c in range(spec.n_classes):
        idx = c * n + split_rng.permutation(n)
        parts["train"].append(idx[:n_train])
        parts["val"].append(idx[n_train:n_train + n_val])
        parts["test"].append(idx[n_train + n_val:])
    splits = {}
    for s in SPLITS:
        idx = np.sort(np.concatenate(parts[s]))
        splits[s] = Split(x[idx], y[idx])
    return SyntheticDataset(spec, templates, splits)


# --- raster datasets on disk --------------------------------------------------


def write_dataset(root, splits: dict, dt: float = 0.01) -> Path:
    """Write ``{split: Split}`` as rasters plus a manifest; returns the manifest path."""
    root = Path(root)
    entries = []
    for name, split in splits.items():
        if name not in SPLITS:
            raise ManifestError(f"unknown split {name!r}")
        folder = root / name
        folder.mkdir(parents=True, exist_ok=True)
        for i, (counts, label) in enumerate(zip(split.x, split.y)):
            p = folder / f"{i:05d}.wsras"
            write_raster(p, SpikeRaster(counts, dt))
            entries.append(ManifestEntry(p, int(label), name, counts.shape[1] * dt))
    manifest = root / MANIFEST_NAME
    write_manifest(manifest, entries)
    return manifest


def load_dataset(root, n_classes: int | None = None) -> dict:
    """Read a raster dataset directory into ``{split: Split}``.

    All rasters of a split must share one shape.
    """
    root = Path(root)
    manifest = root / MANIFEST_NAME if root.is_dir() else root
    if not manifest.exists():
        raise InvalidInputError(f"no manifest at {manifest}")
    entries = load_manifest(manifest, n_classes)
    grouped: dict = {s: ([], []) for s in SPLITS}
    for e in entries:
        if not e.path.exists():
            continue
        grouped[e.split][0].append(read_raster(e.path).counts)
        grouped[e.split][1].append(e.label)
    out = {}
    for s, (xs, ys) in grouped.items():
        if not xs:
            continue
        shapes = {x.shape for x in xs}
        if len(shapes) != 1:
            raise InvalidInputError(f"split {s!r} mixes raster shapes {sorted(shapes)}")
        out[s] = Split(np.stack(xs), np.asarray(ys))
    return out


def preprocess_manifest(manifest, out_dir, *, noise_dir=None, snr_db: float = 5.0,
                        seconds: float = 5.0, augment: int = 1, seed: int = 0) -> Path:
    """Convert a WAV manifest into a raster dataset directory.

    Training clips get ``augment`` noisy copies when a noise directory is
    given, each with its own noise clip and offset drawn from a per-copy seed.
    Other splits stay clean.
    """
    entries = load_manifest(manifest)
    pool = NoisePool(noise_dir) if noise_dir else None
    bank = design_filterbank()
    out_dir = Path(out_dir)
    written = []
    for i, e in enumerate(entries):
        if not e.path.exists():
            continue
        w = read_wav(e.path)
        copies = augment if (pool is not None and e.split == "train") else 1
        for k in range(copies):
            noise, offset = None, 0
            if pool is not None and e.split == "train":
                noise, offset = pool.draw(np.random.default_rng([seed, i, k]))
            raster = preprocess_waveform(w, bank, seconds=seconds, noise=noise, snr_db=snr_db,
                                         noise_offset=offset)
            folder = out_dir / e.split
            folder.mkdir(parents=True, exist_ok=True)
            p = folder / f"{i:05d}_{k}.wsras"
            write_raster(p, raster)
            written.append(ManifestEntry(p, e.label, e.split, raster.n_bins * raster.dt))
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / MANIFEST_NAME
    write_manifest(path, written)
    log.info("wrote %d rasters to %s", len(written), out_dir)
    return path


def compose_stream(split: Split, n_keywords: int, gap_bins: int = 200, background_rate: float = 0.1,
                   seed: int = 0, dt: float = 0.01):
    """Concatenate random samples of ``split`` into one continuous raster.

    Keywords are separated by ``gap_bins`` of Poisson background. Returns the
    raster and one ``(class, start, end)`` label per keyword, in seconds.
    """
    from .streaming import StreamLabel

    rng = np.random.default_rng(seed)
    channels, bins = split.x.shape[1:]
    pieces, labels, t = [], [], 0
    for _ in range(n_keywords):
        pieces.append(rng.poisson(background_rate, size=(channels, gap_bins)))
        t += gap_bins
        i = int(rng.integers(len(split)))
        pieces.append(split.x[i])
        labels.append(StreamLabel(int(split.y[i]), t * dt, (t + bins) * dt))
        t += bins
    pieces.append(rng.poisson(background_rate, size=(channels, gap_bins)))
    return SpikeRaster(np.concatenate(pieces, axis=1), dt), labels
