"""Flat key=value run configuration.

Files are UTF-8 lines of ``key=value``; ``#`` starts a comment; blank lines
are ignored.  Unknown keys are rejected.  Every key has a default except
``stage`` and ``out_dir``, which the commands that need them require
explicitly.  Precedence: defaults < config file < --set overrides < the
PGAN_SEED environment variable (seed only).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, Optional

from .errors import ConfigError
from .losses import LossConfig
from .training import TrainConfig

STAGE_ALIASES = {
    "1": "stage1", "2": "stage2", "3": "stage3",
    "stage1": "stage1", "stage2": "stage2", "stage3": "stage3",
    "pipeline": "pipeline",
}


@dataclass
class RunConfig:
    image_size: int = 128
    seed: int = 0
    epochs: int = 1
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    lambda1: float = 0.5
    lambda2: float = 0.5
    lambda3: float = 1.0
    lambda4: float = 10.0
    buffer_capacity: int = 50
    tau_diff: float = 0.06
    checkpoint_every: int = 500
    train_count: int = 2000
    test_count: int = 200
    base_width: int = 64
    disc_base: int = 64
    head_width: int = 1024
    stage: Optional[str] = None
    data_dir: str = "data"
    out_dir: Optional[str] = None

    def validate(self):
        s = self.image_size
        if s < 32 or s & (s - 1):
            raise ConfigError(f"image_size must be a power of two >= 32, got {s}")
        for name in ("lambda1", "lambda2", "lambda3", "lambda4"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if not (0.0 < self.tau_diff < 1.0):
            raise ConfigError(f"tau_diff must be in (0,1), got {self.tau_diff}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        for name in ("buffer_capacity", "checkpoint_every", "train_count", "test_count",
                     "base_width", "disc_base", "head_width"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.stage is not None and self.stage not in STAGE_ALIASES.values():
            raise ConfigError(f"stage must be one of 1/2/3/pipeline, got {self.stage!r}")

    def require(self, *names: str):
        for name in names:
            if getattr(self, name) is None:
                raise ConfigError(f"config key {name!r} is required for this command")

    def loss_config(self) -> LossConfig:
        return LossConfig(lambda1=self.lambda1, lambda2=self.lambda2,
                          lambda3=self.lambda3, lambda4=self.lambda4)

    def train_config(self) -> TrainConfig:
        self.require("stage")
        if self.stage == "pipeline":
            raise ConfigError("stage=pipeline is a data-generation target, not trainable")
        return TrainConfig(
            stage=self.stage, image_size=self.image_size, epochs=self.epochs,
            seed=self.seed, lr=self.lr, beta1=self.beta1, beta2=self.beta2,
            base_width=self.base_width, disc_base=self.disc_base,
            head_width=self.head_width, buffer_capacity=self.buffer_capacity,
            checkpoint_every=self.checkpoint_every, loss=self.loss_config())

    def echo(self) -> Dict[str, str]:
        out = {}
        for f in fields(RunConfig):
            v = getattr(self, f.name)
            if v is not None:
                out[f.name] = str(v)
        return out


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
_INT_KEYS = {f.name for f in fields(RunConfig) if f.type == "int"}
_FLOAT_KEYS = {f.name for f in fields(RunConfig) if f.type == "float"}


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        if key in _INT_KEYS:
            return int(raw)
        if key in _FLOAT_KEYS:
            return float(raw)
    except ValueError as e:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from e
    if key == "stage":
        if raw not in STAGE_ALIASES:
            raise ConfigError(f"stage must be one of 1/2/3/pipeline, got {raw!r}")
        return STAGE_ALIASES[raw]
    return raw


def parse_config_text(text: str) -> Dict[str, object]:
    values: Dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        key, sep, raw = body.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key = key.strip()
        values[key] = _parse_value(key, raw)
    return values


def load_config(path=None, overrides=None, env=None) -> RunConfig:
    values: Dict[str, object] = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text(encoding="utf-8")))
    for item in overrides or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        values[key.strip()] = _parse_value(key.strip(), raw)
    env = os.environ if env is None else env
    if "PGAN_SEED" in env:
        values["seed"] = _parse_value("seed", env["PGAN_SEED"])
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg
