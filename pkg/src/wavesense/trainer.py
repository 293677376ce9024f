"""Weight initialization, Adam, minibatch BPTT training and checkpoints."""

from __future__ import annotations

import json
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import TrainConfig, WaveSenseConfig, config_hash
from .losses import batch_loss
from .network import WaveSenseNet, param_shapes

__all__ = [
    "TrainingDivergedError",
    "CheckpointError",
    "ChecksumError",
    "IncompatibleCheckpointError",
    "init_weights",
    "Adam",
    "clip_by_global_norm",
    "Split",
    "EpochMetrics",
    "Trainer",
    "train_epoch",
    "evaluate",
    "save_checkpoint",
    "load_checkpoint",
    "Checkpoint",
    "CHECKPOINT_VERSION",
    "restore_trainer",
]

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"WSCKPT1"
CHECKPOINT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class IncompatibleCheckpointError(CheckpointError):
    pass


def init_weights(config: WaveSenseConfig, seed: int = 0, dtype=np.float32) -> dict:
    """Zero-mean normal weights with std ``weight_scaling / sqrt(fan_in)``; zero biases.

    Tensors are drawn in the fixed order of :func:`param_shapes`, so a seed
    fully determines the parameter set.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith("bias"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            std = config.weight_scaling / math.sqrt(shape[1])
            params[name] = (rng.standard_normal(shape) * std).astype(dtype)
    return params


class Adam:
    """Adaptive moment estimation with bias correction."""

    def __init__(self, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict, grads: dict):
        """Update ``params`` in place."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in params.items():
            g = np.asarray(grads[name], dtype=p.dtype)
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if self.lr:
                p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def clip_by_global_norm(grads: dict, max_norm: float):
    """Scale all gradients together so their joint L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


@dataclass
class Split:
    """Rasters ``[n, channels, bins]`` with integer labels."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 3 or self.x.shape[0] != self.y.shape[0]:
            raise ValueError("split needs x [n, channels, bins] and matching labels")

    def __len__(self):
        return self.y.shape[0]


@dataclass
class EpochMetrics:
    loss: float
    accuracy: float
    spike_rate: dict = field(default_factory=dict)
    excess_rate: float = 0.0
    grad_norm: float = 0.0

    def to_dict(self) -> dict:
        return {"loss": self.loss, "accuracy": self.accuracy, "spike_rate": self.spike_rate,
                "excess_rate": self.excess_rate, "grad_norm": self.grad_norm}


def _batches(n, batch_size, order):
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def evaluate(network: WaveSenseNet, split: Split, batch_size: int = 64,
             alpha: float = 0.0) -> EpochMetrics:
    """Loss, accuracy and activity on a split, without recording a tape."""
    n = len(split)
    if n == 0:
        return EpochMetrics(float("nan"), float("nan"))
    loss_sum = correct = excess = 0.0
    rates = None
    for idx in _batches(n, batch_size, np.arange(n)):
        out = network.forward_batch(split.x[idx])
        loss, info = batch_loss(out, split.y[idx], alpha)
        loss_sum += float(loss.value) * len(idx)
        correct += int(np.sum(np.argmax(info["logits"], axis=1) == split.y[idx]))
        stats = out.stats()
        excess += float(stats.excess_per_neuron_bin().sum())
        r = stats.rate_per_layer() * len(idx)
        rates = r if rates is None else rates + r
    names = network.layer_names
    return EpochMetrics(loss_sum / n, correct / n,
                        {k: float(v) for k, v in zip(names, rates / n)}, excess / n)


class Trainer:
    """Owns a network, its optimizer and the data order; one instance per run."""

    def __init__(self, network: WaveSenseNet, train_config: TrainConfig):
        self.network = network
        self.config = train_config
        self.optimizer = Adam(train_config.lr, train_config.betas, train_config.eps)
        self.rng = np.random.default_rng(train_config.seed)
        self.epoch = 0
        self.batch_index = 0

    def epoch_order(self, n: int, epoch: int | None = None) -> np.ndarray:
        epoch = self.epoch if epoch is None else epoch
        seq = np.random.SeedSequence([self.config.seed, epoch])
        return np.random.default_rng(seq).permutation(n)

    def gradients(self, x, y):
        """Forward + backward on one batch; returns (loss, grads, info, stats)."""
        tape = ad.Tape()
        pv = {k: tape.param(k, v) for k, v in self.network.params.items()}
        out = self.network.forward_batch(x, params=pv)
        loss, info = batch_loss(out, y, self.config.alpha)
        value = float(loss.value)
        if not math.isfinite(value):
            raise TrainingDivergedError(f"loss became {value} at epoch {self.epoch}")
        grads = ad.backward(tape, loss)
        return value, grads, info, out.stats()

    def step(self, x, y):
        loss, grads, info, stats = self.gradients(x, y)
        grads, norm = clip_by_global_norm(grads, self.config.grad_clip)
        if not math.isfinite(norm):
            raise TrainingDivergedError(f"gradient norm became {norm} at epoch {self.epoch}")
        self.optimizer.step(self.network.params, grads)
        return loss, info, stats, norm

    def train_epoch(self, data: Split) -> EpochMetrics:
        n = len(data)
        if n == 0:
            raise ValueError("training split is empty")
        order = self.epoch_order(n)
        bs = self.config.batch_size
        batches = list(_batches(n, bs, order))
        loss_sum = correct = excess = norm_sum = 0.0
        seen = 0
        rates = None
        while self.batch_index < len(batches):
            idx = batches[self.batch_index]
            loss, info, stats, norm = self.step(data.x[idx], data.y[idx])
            self.batch_index += 1
            seen += len(idx)
            loss_sum += loss * len(idx)
            correct += int(np.sum(np.argmax(info["logits"], axis=1) == data.y[idx]))
            excess += float(stats.excess_per_neuron_bin().sum())
            norm_sum += norm
            r = stats.rate_per_layer() * len(idx)
            rates = r if rates is None else rates + r
        n_batches = max(len(batches), 1)
        self.epoch += 1
        self.batch_index = 0
        if seen == 0:
            return EpochMetrics(float("nan"), float("nan"))
        return EpochMetrics(loss_sum / seen, correct / seen,
                            {k: float(v) for k, v in zip(self.network.layer_names, rates / seen)},
                            excess / seen, norm_sum / n_batches)

    def fit(self, train: Split, val: Split | None = None, log_path=None, callback=None):
        """Train for the configured number of epochs; returns per-epoch records.

        With ``checkpoint_dir`` set, ``last.ckpt`` is rewritten after every
        epoch. If training diverges the parameters of the last good epoch are
        restored before the error propagates.
        """
        history = []
        ckpt_dir = Path(self.config.checkpoint_dir) if self.config.checkpoint_dir else None
        if ckpt_dir:
            ckpt_dir.mkdir(parents=True, exist_ok=True)
        good = {k: v.copy() for k, v in self.network.params.items()}
        while self.epoch < self.config.epochs:
            try:
                metrics = self.train_epoch(train)
            except TrainingDivergedError:
                self.network.params.update(good)
                log.error("training diverged; restored parameters from epoch %d", self.epoch)
                raise
            good = {k: v.copy() for k, v in self.network.params.items()}
            records = [{"epoch": self.epoch, "split": "train", **metrics.to_dict()}]
            if val is not None and len(val):
                vm = evaluate(self.network, val, alpha=self.config.alpha)
                records.append({"epoch": self.epoch, "split": "val", **vm.to_dict()})
            history.extend(records)
            if log_path is not None:
                with open(log_path, "a") as fh:
                    for rec in records:
                        fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if ckpt_dir:
                save_checkpoint(ckpt_dir / "last.ckpt", self.network, self)
            if callback is not None:
                callback(records)
        return history


def train_epoch(network: WaveSenseNet, data: Split, train_config: TrainConfig,
                trainer: Trainer | None = None) -> EpochMetrics:
    """Run one epoch; pass a :class:`Trainer` to keep optimizer state across epochs."""
    if trainer is None:
        trainer = Trainer(network, train_config)
    return trainer.train_epoch(data)


# --- checkpoints --------------------------------------------------------------


@dataclass
class Checkpoint:
    version: int
    config_hash: int
    config: WaveSenseConfig
    params: dict
    moments_m: dict
    moments_v: dict
    meta: dict

    @property
    def epoch(self) -> int:
        return int(self.meta.get("epoch", 0))

    def network(self, dtype=np.float32) -> WaveSenseNet:
        return WaveSenseNet(self.config, self.params, dtype)


def _pack_tensor(name: str, arr) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    nb = name.encode("utf-8")
    head = struct.pack("<I", len(nb)) + nb + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def save_checkpoint(path, network: WaveSenseNet, trainer: Trainer | None = None,
                    extra: dict | None = None) -> int:
    """Write parameters (and optimizer/data-order state) to ``path``; returns the CRC32.

    Layout, all little-endian: ``WSCKPT1`` magic, u32 version, u64 config
    hash, u32 length + UTF-8 JSON metadata (config, epoch, rng state), u32
    record count, then per tensor: u32 name length, name, u32 rank, u32 dims,
    f32 data; finally the CRC32 of everything before it.
    """
    meta = {"config": network.config.to_dict(), "epoch": 0, "batch_index": 0, "step": 0}
    records = [(f"param/{k}", v) for k, v in network.params.items()]
    if trainer is not None:
        opt = trainer.optimizer
        meta.update(epoch=trainer.epoch, batch_index=trainer.batch_index, step=opt.t,
                    train_config=trainer.config.to_dict(),
                    rng_state=trainer.rng.bit_generator.state)
        for k in network.params:
            if k in opt.m:
                records.append((f"adam/m/{k}", opt.m[k]))
                records.append((f"adam/v/{k}", opt.v[k]))
    if extra:
        meta.update(extra)
    meta_bytes = json.dumps(meta, sort_keys=True, default=int).encode("utf-8")
    body = bytearray(CHECKPOINT_MAGIC)
    body += struct.pack("<IQ", CHECKPOINT_VERSION, config_hash(network.config))
    body += struct.pack("<I", len(meta_bytes)) + meta_bytes
    body += struct.pack("<I", len(records))
    for name, arr in records:
        body += _pack_tensor(name, arr)
    crc = zlib.crc32(body)
    body += struct.pack("<I", crc)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(bytes(body))
    tmp.replace(path)
    return crc


def load_checkpoint(path, expected_config: WaveSenseConfig | None = None) -> Checkpoint:
    """Read and verify a checkpoint; nothing is returned unless the CRC matches."""
    data = Path(path).read_bytes()
    if len(data) < len(CHECKPOINT_MAGIC) + 16 or not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a WaveSense checkpoint")
    (stored_crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != stored_crc:
        raise ChecksumError(f"{path}: checksum mismatch (truncated or corrupt file)")
    pos = len(CHECKPOINT_MAGIC)
    version, chash = struct.unpack_from("<IQ", data, pos)
    pos += 12
    if version != CHECKPOINT_VERSION:
        raise IncompatibleCheckpointError(
            f"{path}: checkpoint format version {version}, expected {CHECKPOINT_VERSION}")
    (meta_len,) = struct.unpack_from("<I", data, pos)
    pos += 4
    meta = json.loads(data[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    config = WaveSenseConfig(**meta["config"])
    if config_hash(config) != chash:
        raise IncompatibleCheckpointError(f"{path}: stored config does not match its hash")
    if expected_config is not None and config_hash(expected_config) != chash:
        raise IncompatibleCheckpointError(
            f"{path}: checkpoint was written for a different network config")
    (n_records,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors = {}
    for _ in range(n_records):
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(dims)
        pos += 4 * count
        tensors[name] = arr.astype(np.float32)
    params = {k[6:]: v for k, v in tensors.items() if k.startswith("param/")}
    m = {k[7:]: v for k, v in tensors.items() if k.startswith("adam/m/")}
    v = {k[7:]: v for k, v in tensors.items() if k.startswith("adam/v/")}
    return Checkpoint(version, chash, config, params, m, v, meta)


def restore_trainer(ckpt: Checkpoint, train_config: TrainConfig | None = None) -> Trainer:
    """Rebuild network, optimizer, data position and RNG from a checkpoint."""
    if train_config is None:
        train_config = TrainConfig(**ckpt.meta.get("train_config", {}))
    trainer = Trainer(ckpt.network(), train_config)
    trainer.optimizer.t = int(ckpt.meta.get("step", 0))
    trainer.optimizer.m = {k: v.copy() for k, v in ckpt.moments_m.items()}
    trainer.optimizer.v = {k: v.copy() for k, v in ckpt.moments_v.items()}
    trainer.epoch = int(ckpt.meta.get("epoch", 0))
    trainer.batch_index = int(ckpt.meta.get("batch_index", 0))
    if "rng_state" in ckpt.meta:
        trainer.rng.bit_generator.state = ckpt.meta["rng_state"]
    return trainer
