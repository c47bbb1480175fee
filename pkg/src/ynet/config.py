"""Run configuration: named profiles, JSON files and flag overrides.

Precedence is flags over config file over profile defaults.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping, Optional, Union

from .model import VARIANTS
from .optim import DEFAULT_C_MAP, LossConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    eta: float = 1e-4
    rho: float = 0.9
    eps: float = 1e-8
    # None picks the per-variant default (encoder1 at 0.01 unless trained from scratch)
    c_map: Optional[dict] = None

    def __post_init__(self):
        if not self.eta >= 0:
            raise ConfigError(f"eta must be >= 0, got {self.eta}")
        if not 0 <= self.rho < 1:
            raise ConfigError(f"rho must lie in [0, 1), got {self.rho}")
        if not self.eps > 0:
            raise ConfigError(f"eps must be > 0, got {self.eps}")
        if self.c_map is not None:
            unknown = set(self.c_map) - set(DEFAULT_C_MAP)
            if unknown:
                raise ConfigError(f"c_map has unknown groups {sorted(unknown)}")
            if any(not v > 0 for v in self.c_map.values()):
                raise ConfigError(f"c_map scales must be positive: {self.c_map}")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    variant: str = "ynet"
    input_size: int = 224
    width_scale: float = 1.0
    batch_size: int = 3
    max_epochs: int = 30
    patience: int = 10
    min_delta: float = 1e-4
    data_root: str = "data"
    out_dir: str = "runs"
    pretrained: Optional[str] = None
    augment: bool = True
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.input_size <= 0 or self.input_size % 32:
            raise ConfigError(f"input_size must be a positive multiple of 32, got {self.input_size}")
        if not 0 < self.width_scale <= 1:
            raise ConfigError(f"width_scale must lie in (0, 1], got {self.width_scale}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 0 or self.patience < 0 or self.min_delta < 0:
            raise ConfigError("max_epochs, patience and min_delta must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_json() + "\n")

    def merged(self, overrides: Mapping[str, Any]) -> "RunConfig":
        """Copy with ``overrides`` applied; nested sections merge key by key."""
        return _apply(self, overrides)


PROFILES = {
    # batch 3, eta 1e-4, 224 px, full VGG19 widths
    "full": RunConfig(),
    "desk": RunConfig(input_size=64, width_scale=0.125, optimizer=OptimizerConfig(eta=1e-3)),
}


def _check_keys(cls, data: Mapping[str, Any], where: str) -> None:
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown {where} keys: {unknown}")


def _apply(cfg: RunConfig, overrides: Mapping[str, Any]) -> RunConfig:
    _check_keys(RunConfig, overrides, "config")
    changes = dict(overrides)
    try:
        if "loss" in changes:
            _check_keys(LossConfig, changes["loss"], "loss")
            changes["loss"] = replace(cfg.loss, **changes["loss"])
        if "optimizer" in changes:
            _check_keys(OptimizerConfig, changes["optimizer"], "optimizer")
            changes["optimizer"] = replace(cfg.optimizer, **changes["optimizer"])
        return replace(cfg, **changes)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def load_config(path: Union[str, Path], profile: str = "full") -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return _apply(PROFILES[profile], data)


def resolve_config(profile: str = "full", path: Union[str, Path, None] = None,
                   flags: Optional[Mapping[str, Any]] = None) -> RunConfig:
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; expected one of {sorted(PROFILES)}")
    cfg = load_config(path, profile) if path is not None else PROFILES[profile]
    return _apply(cfg, {k: v for k, v in (flags or {}).items() if v is not None})
