"""Model and training configuration with the ``paper`` and ``tiny`` presets."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ConfigError(ValueError):
    pass


PRECISIONS = {"f32": np.float32, "f64": np.float64}


@dataclass(frozen=True)
class ModelConfig:
    name: str = "paper"
    sample_rate: int = 16000
    # audio encoder: conv1d + ReLU
    enc_channels: int = 256
    enc_kernel: int = 16
    enc_stride: int = 8
    # visual stream
    visual_dim: int = 256
    visual_fps: float = 25.0
    frame_size: int = 224
    visual_channels: tuple[int, ...] = (32, 64, 128, 256)
    frontend_kernel: tuple[int, int, int] = (5, 7, 7)
    # cross attention
    heads: int = 8
    attn_residual: bool = True
    # separator
    blocks: int = 6
    hidden: int = 256
    proj: int = 128
    chunk_len: int = 64
    dropout: float = 0.3
    # mask estimation / resynthesis
    stft_window: int = 512
    stft_hop: int = 256

    def __post_init__(self):
        pos = ["sample_rate", "enc_channels", "enc_kernel", "enc_stride", "visual_dim", "frame_size",
               "heads", "blocks", "hidden", "proj", "chunk_len", "stft_window", "stft_hop"]
        for name in pos:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.enc_channels % self.heads:
            raise ConfigError(f"enc_channels={self.enc_channels} is not divisible by heads={self.heads}")
        if self.hidden != self.enc_channels:
            raise ConfigError(f"separator hidden size {self.hidden} must equal enc_channels "
                              f"{self.enc_channels} (residual paths add GRU output to the input)")
        if self.proj > self.hidden:
            raise ConfigError(f"proj={self.proj} exceeds hidden={self.hidden}")
        if self.chunk_len < 2:
            raise ConfigError("chunk_len must be at least 2 for 50% overlap")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if len(self.visual_channels) != 4:
            raise ConfigError("visual_channels needs four stage widths")
        if self.frame_size % 16:
            raise ConfigError(f"frame_size {self.frame_size} must be a multiple of 16")

    @property
    def head_dim(self) -> int:
        return self.enc_channels // self.heads

    def latent_len(self, n_samples: int) -> int:
        return (n_samples - self.enc_kernel) // self.enc_stride + 1

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return _from_dict(cls, d)

    def fingerprint(self) -> int:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch: int = 16
    rms_alpha: float = 0.99
    rms_eps: float = 1e-8
    plateau_factor: float = 0.8
    plateau_patience: int = 5
    plateau_threshold: float = 1e-4
    epochs: int = 30
    segment_s: float = 1.0
    loss_clip_db: float = -30.0
    seed: int = 0
    precision: str = "f32"
    val_batch: int = 2

    def __post_init__(self):
        if not 0.0 < self.plateau_factor < 1.0:
            raise ConfigError(f"plateau_factor must lie in (0, 1), got {self.plateau_factor}")
        if self.plateau_patience < 1:
            raise ConfigError("plateau_patience must be >= 1")
        if self.lr <= 0 or self.batch < 1 or self.epochs < 1 or self.val_batch < 1:
            raise ConfigError("lr, batch, val_batch and epochs must be positive")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}, got {self.precision!r}")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return _from_dict(cls, d)


def _from_dict(cls, d: dict):
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(names)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()}
    try:
        return cls(**kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


MODEL_PRESETS: dict[str, ModelConfig] = {
    "paper": ModelConfig(),
    "paper-128": ModelConfig(name="paper-128", frame_size=128),
    "tiny": ModelConfig(
        name="tiny", enc_channels=32, visual_dim=32, frame_size=32, visual_channels=(4, 8, 16, 32),
        heads=2, blocks=2, hidden=32, proj=16),
}

TRAIN_PRESETS: dict[str, TrainConfig] = {
    "paper": TrainConfig(),
    "paper-128": TrainConfig(),
    "tiny": TrainConfig(lr=1e-3, batch=4, epochs=20),
}


def preset(name: str) -> tuple[ModelConfig, TrainConfig]:
    if name not in MODEL_PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(MODEL_PRESETS)}")
    return MODEL_PRESETS[name], TRAIN_PRESETS[name]


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "train": self.train.to_dict()}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {"model", "train"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        return cls(ModelConfig.from_dict(d.get("model", {})), TrainConfig.from_dict(d.get("train", {})))

    @classmethod
    def load(cls, path: str | Path, base: "RunConfig | None" = None) -> "RunConfig":
        """Read JSON; fields missing from the file fall back to ``base`` (default: paper preset)."""
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        base = base or cls()
        merged = {"model": {**base.model.to_dict(), **raw.get("model", {})},
                  "train": {**base.train.to_dict(), **raw.get("train", {})}}
        extra = {k: v for k, v in raw.items() if k not in merged}
        return cls.from_dict({**merged, **extra})
