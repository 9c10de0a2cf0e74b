"""Configuration, seeding and shared numeric conventions."""

from __future__ import annotations

import dataclasses
import json
import os
import random
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

import numpy as np
import torch

LOG_VAR_CLAMP = 30.0


class ConfigError(ValueError):
    """Raised when a configuration document cannot be parsed."""


class ValidationError(ValueError):
    """Raised when a value violates a documented invariant."""


class DimensionError(ValueError):
    """Raised on tensor shape mismatches."""


@dataclass
class TrainConfig:
    image_size: int = 64
    latent_dim: int = 512
    lambda_style: float = 1.0
    lambda_id: float = 5.0
    lambda_adv: float = 0.1
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.99
    batch_size: int = 8
    iterations: int = 1000
    seed: int = 0
    sca_gamma_init: float = 0.0
    leaky_slope: float = 0.2
    upsample_mode: str = "nearest"
    eps_norm: float = 1e-5
    # channel widths of every network are divided by this (1 = full widths)
    width_divisor: int = 1
    checkpoint_every: int = 0
    loss_history: int = 1000
    embedder_seed: int = 1234
    backbone_seed: int = 4321

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.image_size <= 0 or self.image_size % 32:
            raise ValidationError(
                f"image_size must be a positive multiple of 32, got {self.image_size}"
            )
        if self.latent_dim < 1:
            raise ValidationError("latent_dim must be >= 1")
        for name in ("lambda_style", "lambda_id", "lambda_adv"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.iterations < 0:
            raise ValidationError("iterations must be >= 0")
        if self.lr < 0:
            raise ValidationError("lr must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValidationError("beta1 and beta2 must lie in [0, 1)")
        if self.upsample_mode not in ("nearest", "bilinear"):
            raise ValidationError(
                f"upsample_mode must be 'nearest' or 'bilinear', got {self.upsample_mode!r}"
            )
        if self.eps_norm <= 0:
            raise ValidationError("eps_norm must be > 0")
        if self.width_divisor < 1 or 512 % self.width_divisor:
            raise ValidationError("width_divisor must divide 512")

    def width(self, channels: int) -> int:
        """Scale a full-size channel width by ``width_divisor``."""
        return max(1, channels // self.width_divisor)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def replace(self, **changes: Any) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _coerce(name: str, value: Any) -> Any:
    kind = _FIELD_TYPES[name]
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(f"field {name!r}: expected an integer, got {value!r}")
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"field {name!r}: expected a number, got {value!r}")
        if not np.isfinite(value):
            raise ConfigError(f"field {name!r}: must be finite")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"field {name!r}: expected a string, got {value!r}")
    return value


def config_from_dict(doc: dict[str, Any]) -> TrainConfig:
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object")
    kwargs = {}
    for key, value in doc.items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown field {key!r}")
        kwargs[key] = _coerce(key, value)
    return TrainConfig(**kwargs)


def load_config(path: str | os.PathLike) -> TrainConfig:
    """Read a flat JSON document into a validated :class:`TrainConfig`.

    Missing fields take their defaults.
    """
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(doc)


def seed_all(seed: int) -> torch.Generator:
    """Seed python, numpy and torch; returns a fresh torch generator for noise."""
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    return torch.Generator().manual_seed(seed)


def check_finite(name: str, tensor: torch.Tensor) -> torch.Tensor:
    if tensor.is_meta:
        return tensor
    if not torch.isfinite(tensor).all():
        raise ValueError(f"{name} contains non-finite values")
    return tensor


def as_batch(x: torch.Tensor, ndim: int = 4) -> tuple[torch.Tensor, bool]:
    """Add a leading batch axis if ``x`` is a single item; report whether one was added."""
    if x.dim() == ndim - 1:
        return x.unsqueeze(0), True
    if x.dim() != ndim:
        raise DimensionError(f"expected {ndim - 1}-d or {ndim}-d tensor, got shape {tuple(x.shape)}")
    return x, False
