"""Architecture and training configuration, plain-text config files, presets.

Config files are ``key = value`` lines (``#`` starts a comment). Architecture
keys use the names of the published parameter tables so a table can be pasted
in directly::

    n_classes        = 2
    n_channels_in    = 64
    dilations        = [2, 4, 8, 16, 2, 4, 8, 16]
    threshold        = 1.0
    bias             = true
"""

from __future__ import annotations

import ast
import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

__all__ = [
    "ConfigError",
    "WaveSenseConfig",
    "TrainConfig",
    "PRESETS",
    "parse_config_text",
    "load_config",
    "format_config",
    "apply_overrides",
    "config_hash",
]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class WaveSenseConfig:
    n_classes: int = 2
    n_channels_in: int = 64
    n_channels_res: int = 16
    n_channels_skip: int = 32
    n_hidden: int = 32
    dilations: tuple = (2, 4, 8, 16, 2, 4, 8, 16)
    kernel_size: int = 2
    threshold: float = 1.0
    learning_window: float = 0.3
    tau_v: float = 2.0
    tau_s: float = 2.0
    weight_scaling: float = 0.5
    bias: bool = True
    # readout time constant in bins; None means max(dilations)
    tau_lp: float | None = None

    def __post_init__(self):
        try:
            object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
            for name in ("threshold", "learning_window", "tau_v", "tau_s", "weight_scaling"):
                object.__setattr__(self, name, float(getattr(self, name)))
            if self.tau_lp is not None:
                object.__setattr__(self, "tau_lp", float(self.tau_lp))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config value: {exc}") from None
        for name in ("n_classes", "n_channels_in", "n_channels_res", "n_channels_skip", "n_hidden"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.kernel_size != 2:
            raise ConfigError("the spiking network supports kernel_size = 2 only")
        if not self.dilations or any(d < 1 for d in self.dilations):
            raise ConfigError("dilations must be a non-empty list of integers >= 1")
        if not self.threshold > 0:
            raise ConfigError("threshold must be positive")
        if not self.learning_window > 0:
            raise ConfigError("learning_window must be positive")
        if not (self.tau_v > 0 and self.tau_s > 0):
            raise ConfigError("tau_v and tau_s must be positive")
        if self.weight_scaling < 0:
            raise ConfigError("weight_scaling must be non-negative")
        if self.tau_lp is not None and not self.tau_lp > 0:
            raise ConfigError("tau_lp must be positive")

    @property
    def readout_tau(self) -> float:
        return float(max(self.dilations)) if self.tau_lp is None else float(self.tau_lp)

    def replace(self, **changes) -> "WaveSenseConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["dilations"] = list(self.dilations)
        return d


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 30
    alpha: float = 0.01
    seed: int = 0
    grad_clip: float = 10.0
    checkpoint_dir: str | None = None
    deterministic: bool = True

    def __post_init__(self):
        try:
            object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
            for name in ("lr", "eps", "alpha", "grad_clip"):
                object.__setattr__(self, name, float(getattr(self, name)))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid training value: {exc}") from None
        if not self.lr >= 0:
            raise ConfigError("lr must be non-negative")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.alpha < 0:
            raise ConfigError("alpha must be non-negative")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError("betas must be two numbers in [0, 1)")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d


_SNN_COMMON = dict(n_channels_in=64, threshold=1.0, learning_window=0.3, kernel_size=2,
                   bias=True, tau_v=2.0, tau_s=2.0, weight_scaling=0.5)

PRESETS = {
    "aloha": WaveSenseConfig(n_classes=2, n_channels_res=16, n_channels_skip=32, n_hidden=32,
                             dilations=(2, 4, 8) * 4, **_SNN_COMMON),
    "heysnips": WaveSenseConfig(n_classes=2, n_channels_res=16, n_channels_skip=32, n_hidden=32,
                                dilations=(2, 4, 8, 16) * 2, **_SNN_COMMON),
    "speechcommands": WaveSenseConfig(n_classes=35, n_channels_res=32, n_channels_skip=64,
                                      n_hidden=128, dilations=(2, 4, 8, 16) * 3, **_SNN_COMMON),
    "synthetic": WaveSenseConfig(n_classes=4, n_channels_res=16, n_channels_skip=32, n_hidden=32,
                                 dilations=(2, 4, 8, 16), **_SNN_COMMON),
}

_NET_KEYS = {f.name for f in dataclasses.fields(WaveSenseConfig)}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}


def _parse_value(raw: str):
    text = raw.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null"):
        return None
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def parse_config_text(text: str, source: str = "<config>") -> tuple[dict, dict]:
    """Split ``key = value`` lines into (network, training) override dicts."""
    net, train = {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        sep = "=" if "=" in line else (":" if ":" in line else None)
        if sep is None:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split(sep, 1))
        key = key.replace("-", "_")
        if key in _NET_KEYS:
            net[key] = _parse_value(raw)
        elif key in _TRAIN_KEYS:
            train[key] = _parse_value(raw)
        else:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
    return net, train


def apply_overrides(net_cfg: WaveSenseConfig, train_cfg: TrainConfig, overrides) -> tuple:
    """Apply ``key=value`` strings on top of existing configs."""
    text = "\n".join(overrides or [])
    net, train = parse_config_text(text, "<overrides>")
    try:
        return net_cfg.replace(**net), train_cfg.replace(**train)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path_or_preset) -> tuple[WaveSenseConfig, TrainConfig]:
    """Read a config file, or return a named preset with default training settings.

    Architecture keys missing from the file fall back to :class:`WaveSenseConfig`
    defaults (the HeySnips table).
    """
    name = str(path_or_preset)
    path = Path(name)
    if not path.exists():
        if name.lower() in PRESETS:
            return PRESETS[name.lower()], TrainConfig()
        raise ConfigError(f"config file not found: {name}")
    net, train = parse_config_text(path.read_text(), str(path))
    try:
        return WaveSenseConfig(**net), TrainConfig(**train)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def format_config(cfg: WaveSenseConfig, train: TrainConfig | None = None) -> str:
    lines = []
    for key, value in cfg.to_dict().items():
        lines.append(f"{key} = {_format_value(value)}")
    if train is not None:
        for key, value in train.to_dict().items():
            lines.append(f"{key} = {_format_value(value)}")
    return "\n".join(lines) + "\n"


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, str):
        return repr(value)
    return str(value)


def config_hash(cfg: WaveSenseConfig) -> int:
    """Stable 64-bit digest of the architecture config."""
    canon = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return int.from_bytes(hashlib.sha256(canon.encode()).digest()[:8], "little")
