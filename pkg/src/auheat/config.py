"""Flat ``section.key = value`` config files merged onto dataclass defaults."""
from __future__ import annotations

import ast
from dataclasses import dataclass, field, fields
from pathlib import Path

from .backbone import ConfigError
from .training import AugmentationConfig, TrainConfig
from .transfer import TRUNK_CHANNELS


@dataclass
class ModelConfig:
    stem_channels: int = 64
    channels: int = 128
    depth: int = 4
    trunk_channels: int = TRUNK_CHANNELS


@dataclass
class DataConfig:
    aus: tuple[int, ...] = (6, 10, 12, 14, 17)
    n_frames: int = 1000
    size: int = 256
    yaw_range: float = 40.0
    split: str = "train"
    eval_split: str = "test"


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def section(self, name: str):
        if name == "aug":
            return self.train.aug
        if name not in ("train", "model", "data"):
            raise ConfigError(f"unknown config section {name!r}")
        return getattr(self, name)

    def set(self, key: str, value) -> None:
        section, _, name = key.partition(".")
        target = self.section(section)
        known = {f.name: f for f in fields(target)}
        if name not in known or name == "aug":
            raise ConfigError(f"unknown config key {key!r}")
        setattr(target, name, coerce(value, getattr(target, name), key))

    def flat(self) -> dict:
        out = {}
        for sec in ("train", "aug", "model", "data"):
            obj = self.section(sec)
            for f in fields(obj):
                if f.name != "aug":
                    out[f"{sec}.{f.name}"] = getattr(obj, f.name)
        return out


def parse_value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null", ""):
        return None
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def coerce(value, current, key: str = ""):
    """Convert ``value`` to the type of ``current`` where that is unambiguous."""
    if isinstance(value, str) and not isinstance(current, str):
        value = parse_value(value)
    if value is None:
        return None
    try:
        if isinstance(current, bool):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(current, int) and not isinstance(current, bool):
            if isinstance(value, float) and not value.is_integer():
                raise TypeError
            return int(value)
        if isinstance(current, float):
            return float(value)
        if isinstance(current, tuple):
            if isinstance(value, (int, float)):
                value = (value,)
            return tuple(int(v) for v in value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot use {value!r} where {type(current).__name__} is expected") from None
    return value


def parse_config(text: str, source: str = "<config>") -> dict:
    entries = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or "." not in key:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value', got {raw.strip()!r}")
        entries[key] = value.strip()
    return entries


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {p}")
        for k, v in parse_config(p.read_text(), str(p)).items():
            cfg.set(k, v)
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg.set(k, v)
    # re-validate after merging
    cfg.train.__post_init__()
    return cfg


def dump_config(cfg: RunConfig) -> str:
    def fmt(v):
        if isinstance(v, tuple):
            return ",".join(str(x) for x in v)
        return str(v)

    return "".join(f"{k} = {fmt(v)}\n" for k, v in cfg.flat().items())


def config_fields() -> list[tuple[str, object]]:
    """(dotted key, default) for every tunable field."""
    return list(RunConfig().flat().items())


__all__ = ["AugmentationConfig", "DataConfig", "ModelConfig", "RunConfig", "TrainConfig",
           "config_fields", "dump_config", "load_config", "parse_config"]
