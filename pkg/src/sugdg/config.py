"""Training configuration and its flat ``key = value`` file format."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from .errors import ConfigError, LoadError

CONFIG_HEADER = "SUGDG-CONFIG v1"

# fixed offsets deriving independent random streams from one master seed
STREAMS = {"generation": 0, "split": 1, "init": 2, "shuffle": 3, "augment": 4}


@dataclass(frozen=True)
class TrainConfig:
    q: float = 0.2
    lam: float = 0.5
    K: int = 2
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 5e-5
    step1_epochs: int = 30
    step2_epochs: int = 50
    split_method: str = "random"
    split_metric: str = "icp"
    seed: int = 0
    kernel_multipliers: Tuple[float, ...] = (0.25, 0.5, 1.0, 2.0, 4.0)
    sda: bool = True
    sda_eps: float = 1e-3
    sda_mode: str = "marginal"
    js_eps: float = 1e-6
    soft_scale: float = 1.0
    n_points: int = 256
    plateau_window: int = 5
    plateau_threshold: float = 0.01
    aug_jitter: float = 0.01
    aug_rotation: float = 0.2618
    embed_widths: Tuple[int, ...] = (3, 32, 64, 128)
    cls_hidden: Tuple[int, ...] = (64, 32)

    def __post_init__(self):
        if self.q < 0:
            raise ConfigError("q must be >= 0")
        if self.lam < 0:
            raise ConfigError("lam must be >= 0")
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if self.step2_epochs > 0 and self.K < 2:
            raise ConfigError("step 2 needs K >= 2 sub-domains")
        if self.batch_size < 2 or self.batch_size % max(self.K, 1):
            raise ConfigError(f"batch_size {self.batch_size} must be >= 2 and divisible by K={self.K}")
        if self.step2_epochs > 0 and self.batch_size // self.K < 2:
            raise ConfigError("each sub-domain needs at least 2 samples per batch")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("lr must be > 0 and weight_decay >= 0")
        if self.step1_epochs < 0 or self.step2_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.split_method not in ("random", "geometric", "entropy", "feature"):
            raise ConfigError(f"unknown split_method {self.split_method!r}")
        if self.split_metric not in ("icp", "cd"):
            raise ConfigError(f"unknown split_metric {self.split_metric!r}")
        if not self.kernel_multipliers or any(m <= 0 for m in self.kernel_multipliers):
            raise ConfigError("kernel_multipliers must be positive")
        if self.sda_mode not in ("marginal", "cross"):
            raise ConfigError(f"unknown sda_mode {self.sda_mode!r}; choose marginal or cross")
        if self.sda_eps <= 0 or self.js_eps <= 0:
            raise ConfigError("distance clamps must be > 0")
        if self.soft_scale < 0:
            raise ConfigError("soft_scale must be >= 0")
        if self.n_points < 8:
            raise ConfigError("n_points must be >= 8")
        if self.plateau_window < 1 or self.plateau_threshold < 0:
            raise ConfigError("plateau_window must be >= 1 and plateau_threshold >= 0")
        if self.aug_jitter < 0 or self.aug_rotation < 0:
            raise ConfigError("augmentation parameters must be >= 0")
        if len(self.embed_widths) < 2 or self.embed_widths[0] != 3:
            raise ConfigError("embed_widths must start with 3")
        if len(self.cls_hidden) < 2:
            raise ConfigError("cls_hidden needs at least two hidden layers (f_h taps layer 2)")

    def stream(self, name: str, *extra: int) -> np.random.SeedSequence:
        """Random stream ``name`` of the master seed, optionally keyed further (epoch, batch...)."""
        return np.random.SeedSequence([self.seed, STREAMS[name], *extra])

    def with_(self, **changes) -> "TrainConfig":
        return replace(self, **changes)

    # serialisation ----------------------------------------------------------
    def to_text(self) -> str:
        lines = [CONFIG_HEADER]
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(repr(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            else:
                value = repr(value) if isinstance(value, float) else str(value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "TrainConfig":
        lines = text.splitlines()
        if not lines or lines[0].strip() != CONFIG_HEADER:
            raise LoadError(f"{source}: missing '{CONFIG_HEADER}' header")
        known = {f.name: f for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(lines[1:], start=2):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = (part.strip() for part in line.partition("="))
            if not sep:
                raise LoadError(f"{source}:{lineno}: expected 'key = value'")
            if key not in known:
                raise LoadError(f"{source}:{lineno}: unknown key {key!r}")
            if key in values:
                raise LoadError(f"{source}:{lineno}: duplicate key {key!r}")
            values[key] = _parse(key, value, getattr(cls, key), source, lineno)
        missing = sorted(set(known) - set(values))
        if missing:
            raise LoadError(f"{source}: missing keys {missing}")
        return cls(**values)

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:12]


def _parse(key, text, default, source, lineno):
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false"):
                raise ValueError("expected true or false")
            return text.lower() == "true"
        if isinstance(default, tuple):
            kind = type(default[0])
            return tuple(kind(v) for v in text.split(",") if v.strip())
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError as exc:
        raise LoadError(f"{source}:{lineno}: bad value for {key}: {exc}") from exc


def bundled_config() -> TrainConfig:
    """Desk-scale settings for the bundled synthetic benchmark.

    The plateau window equals the step-2 budget, so step 2 always runs its full
    length and both arms of a comparison see the same number of epochs.
    """
    return TrainConfig(batch_size=32, n_points=128, step1_epochs=20, step2_epochs=30, plateau_window=30)


def load_config(path: Union[str, Path]) -> TrainConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise LoadError(f"cannot read config {path}: {exc}") from exc
    return TrainConfig.from_text(text, str(path))


def save_config(config: TrainConfig, path: Union[str, Path]) -> None:
    Path(path).write_text(config.to_text())
