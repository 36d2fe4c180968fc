"""Configuration objects shared by every stage of the codec lab.

Defaults here are the single index of gap-filling choices: anything the
method description leaves open (optimizer, widths, padding policy, entropy
model details) is pinned as a default in one of these dataclasses.
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

SUPPORTED_CHANNELS = (4, 8, 16, 32, 64)
STANDARD_LAMBDAS = (256, 512, 1024, 2048)
PAD_MULTIPLE = 64
SIGMA_MIN = 1e-2


class ConfigError(ValueError):
    """Raised for unsupported or inconsistent configuration values."""


class CodingMode(enum.IntEnum):
    CC = 0
    CR = 1
    MCR = 2

    @classmethod
    def parse(cls, value: "str | int | CodingMode") -> "CodingMode":
        if isinstance(value, CodingMode):
            return value
        if isinstance(value, int):
            return cls(value)
        try:
            return cls[str(value).upper()]
        except KeyError:
            raise ConfigError(f"unknown coding mode {value!r}; expected cc, cr or mcr") from None

    @property
    def label(self) -> str:
        return {CodingMode.CC: "Cond.", CodingMode.CR: "Cond. Res.", CodingMode.MCR: "Masked Cond. Res."}[self]


@dataclass(frozen=True)
class ModelConfig:
    mode: CodingMode = CodingMode.CC
    channels: int = 64
    # inter codec
    base_width: int = 64
    latent_channels: int = 96
    hyper_channels: int = 64
    dec_channels: int = 64
    multiscale_condition: bool = True
    temporal_prior: bool = True
    temporal_prior_source: str = "refined"  # "refined" (x_c dot) or "raw" (x_c)
    # motion
    flow_width: int = 16
    motion_width: int = 64
    motion_latent_channels: int = 64
    # mask generator
    mask_width: int = 32

    def __post_init__(self):
        object.__setattr__(self, "mode", CodingMode.parse(self.mode))
        if self.channels not in SUPPORTED_CHANNELS:
            raise ConfigError(f"channel size C={self.channels} not in {SUPPORTED_CHANNELS}")
        if self.temporal_prior_source not in ("refined", "raw"):
            raise ConfigError(f"temporal_prior_source must be 'refined' or 'raw', got {self.temporal_prior_source!r}")
        for f in ("base_width", "latent_channels", "hyper_channels", "dec_channels",
                  "flow_width", "motion_width", "motion_latent_channels", "mask_width"):
            if getattr(self, f) < 1:
                raise ConfigError(f"{f} must be positive")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["mode"] = self.mode.name
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


def toy_model_config(mode="cc", channels: int = 16, **overrides) -> ModelConfig:
    """Scaled-down widths used for desk-scale CPU experiments."""
    base = dict(
        mode=CodingMode.parse(mode),
        channels=channels,
        base_width=24,
        latent_channels=32,
        hyper_channels=16,
        dec_channels=24,
        flow_width=12,
        motion_width=16,
        motion_latent_channels=16,
        mask_width=16,
    )
    base.update(overrides)
    return ModelConfig(**base)


@dataclass(frozen=True)
class DataConfig:
    """Synthetic training/validation benchmark."""

    frame_size: int = 64
    source_size: int = 96
    clip_frames: int = 5
    num_train_clips: int = 64
    num_val_clips: int = 8
    max_motion: float = 3.0
    noise_sigma: float = 0.01
    seed: int = 1234


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    lmbda: float = 512
    seed: int = 0
    batch_size: int = 4
    learning_rate: float = 1e-4
    epa_learning_rate: float = 1e-5
    iters_per_epoch: int = 10
    warmup_iters: int = 2000
    warmup_learning_rate: float = 3e-3
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            object.__setattr__(self, "model", ModelConfig.from_dict(self.model))
        if isinstance(self.data, dict):
            object.__setattr__(self, "data", DataConfig(**self.data))
        if self.lmbda <= 0:
            raise ConfigError("lambda must be positive")

    @property
    def standard_lambda(self) -> bool:
        return self.lmbda in STANDARD_LAMBDAS

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def with_(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


def digest_of(obj: Any, extra: bytes = b"") -> bytes:
    """8-byte truncated SHA-256 of a JSON-serialisable object (plus optional raw bytes)."""
    h = hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode())
    h.update(extra)
    return h.digest()[:8]


def load_config_file(path: str | Path) -> dict[str, Any]:
    with open(path) as fh:
        return json.load(fh)
