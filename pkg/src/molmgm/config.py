"""Flat ``key = value`` run configuration with validation."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Iterable


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    # 3D encoder
    d_model: int = 256
    heads: int = 8
    layers: int = 12
    k_rbf: int = 64
    d_cut: float = 5.0
    no_3d_attention: bool = False
    no_update_layer: bool = False
    # 2D position encoder
    pe_kind: str = "retrans"  # retrans | rwse | none
    pe_dim: int = 64
    pe_heads: int = 4
    pe_layers: int = 12
    rwse_steps: int = 16
    # decoder and pretraining objective
    decoder_kind: str = "independent"  # independent | dependent
    decoder_layers: int = 2
    use_srd: bool = True
    use_distill: bool = True
    freeze_encoder: bool = False
    mask_ratio: float = 0.25
    noise_scale: float = 0.04
    denoise_weight: float = 0.1
    no_augmentation: bool = False
    # optimization
    batch_size: int = 128
    accumulate_grad_batches: int = 2
    lr_init: float = 5e-5
    lr_min: float = 1e-6
    warmup_steps: int = 10000
    max_steps: int = 400000
    weight_decay: float = 1e-16
    # finetuning
    task: str = "scalar"  # scalar | energy | energy+forces
    label: str = "y"
    loss_type: str = "mse"  # mse | mae
    force_weight: float = 0.8
    energy_weight: float = 0.2
    ema_alpha_y: float = 0.05
    ema_alpha_dy: float = 1.0
    fd_step: float = 1e-3
    # run
    seed: int = 0
    log_every: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.pe_dim % self.pe_heads:
            raise ConfigError(f"pe_dim={self.pe_dim} not divisible by pe_heads={self.pe_heads}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError("mask_ratio must lie in (0, 1)")
        for name in ("noise_scale", "denoise_weight", "force_weight", "energy_weight", "weight_decay"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.lr_min > self.lr_init:
            raise ConfigError("lr_min must not exceed lr_init")
        if self.pe_kind not in ("retrans", "rwse", "none"):
            raise ConfigError(f"unknown pe_kind {self.pe_kind!r}")
        if self.decoder_kind not in ("independent", "dependent"):
            raise ConfigError(f"unknown decoder_kind {self.decoder_kind!r}")
        if self.task not in ("scalar", "energy", "energy+forces"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.loss_type not in ("mse", "mae"):
            raise ConfigError(f"unknown loss_type {self.loss_type!r}")
        if self.fd_step <= 0:
            raise ConfigError("fd_step must be positive")

    def replace(self, **changes: Any) -> "Config":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))


def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


_TYPES = {f.name: f.type for f in fields(Config)}


def _coerce(key: str, raw: str) -> Any:
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _TYPES[key]
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_config_text(text: str, base: Config | None = None) -> Config:
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        values[key] = _coerce(key, raw)
    return dataclasses.replace(base or Config(), **values)


def load_config(path: str | Path | None, overrides: Iterable[str] = ()) -> Config:
    cfg = Config() if path is None else parse_config_text(Path(path).read_text(encoding="utf-8"))
    return apply_overrides(cfg, overrides)


def apply_overrides(cfg: Config, overrides: Iterable[str]) -> Config:
    values = {}
    for item in overrides:
        item = item[2:] if item.startswith("--") else item
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        key, raw = item.split("=", 1)
        values[key.strip()] = _coerce(key.strip(), raw)
    return dataclasses.replace(cfg, **values) if values else cfg
