"""Application configuration: one YAML document, flags and env vars on top.

Unknown keys are rejected at every nesting level.
"""
from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .model import NetworkConfig
from .postprocess import PostprocessConfig, RegistrationConfig
from .preprocess import MAX_EV, MAX_KELVIN, RegionSpec
from .trainer import TrainConfig

CONFIG_VERSION = 1

ENV_PATHS = {
    "data_dir": "SURFWATCH_DATA_DIR",
    "checkpoint_dir": "SURFWATCH_CHECKPOINT_DIR",
    "output_dir": "SURFWATCH_OUTPUT_DIR",
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Paths:
    data_dir: str = "data"
    checkpoint_dir: str = "checkpoints"
    output_dir: str = "out"
    exclusions: str | None = None


@dataclass(frozen=True)
class DatasetConfig:
    n_aug_per_image: int = 2
    held_out: int = 9
    max_ev: float = MAX_EV
    max_kelvin: float = MAX_KELVIN
    held_out_policy: str = "originals"
    calibration_images: int = 32


@dataclass(frozen=True)
class AppConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    paths: Paths = field(default_factory=Paths)
    region: RegionSpec = field(default_factory=RegionSpec)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    postprocess: PostprocessConfig = field(default_factory=PostprocessConfig)
    watch_interval: float = 5.0
    workers: int = 6

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def dump(self, path: str | os.PathLike | None = None) -> str:
        text = yaml.safe_dump(self.to_dict(), sort_keys=False)
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def from_dict(cls, data: dict, where: str = ""):
    """Build dataclass ``cls`` from nested dicts, rejecting unknown keys."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            kwargs[key] = from_dict(hint, value, f"{where}.{key}" if where else key)
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def load_config(path: str | os.PathLike | None = None, env: dict | None = None) -> AppConfig:
    data = {}
    if path is not None:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    version = data.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version}")
    cfg = from_dict(AppConfig, data)
    env = os.environ if env is None else env
    overrides = {k: env[v] for k, v in ENV_PATHS.items() if env.get(v)}
    if overrides:
        cfg = dataclasses.replace(cfg, paths=dataclasses.replace(cfg.paths, **overrides))
    return cfg


def override(cfg, **changes):
    """``dataclasses.replace`` that ignores ``None`` values."""
    changes = {k: v for k, v in changes.items() if v is not None}
    return dataclasses.replace(cfg, **changes) if changes else cfg


__all__ = [
    "AppConfig", "ConfigError", "DatasetConfig", "Paths", "RegistrationConfig",
    "load_config", "from_dict", "override",
]
