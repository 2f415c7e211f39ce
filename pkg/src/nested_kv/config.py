"""Flat ``key = value`` configuration files."""

from __future__ import annotations

import dataclasses
import os
from pathlib import Path

from .model import ModelConfig
from .training import PretrainConfig, TrainConfig


class ConfigError(ValueError):
    pass


# file key -> (section, field)
KEYS = {
    **{f.name: ("model", f.name) for f in dataclasses.fields(ModelConfig)},
    "pretrain_steps": ("pretrain", "steps"),
    "pretrain_learning_rate": ("pretrain", "learning_rate"),
    "pretrain_batch_size": ("pretrain", "batch_size"),
    "kd_weight": ("train", "kd_weight"),
    "lm_weight": ("train", "lm_weight"),
    "learning_rate": ("train", "learning_rate"),
    "steps": ("train", "steps"),
    "batch_size": ("train", "batch_size"),
    "schedule": ("train", "schedule"),
    "train_fraction": ("corpus", "train_fraction"),
}


def _convert(raw: str, kind):
    if kind is bool or kind == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if kind in (int, "int"):
        return int(raw)
    if kind in (float, "float"):
        return float(raw)
    return raw


def _field_type(section: str, name: str):
    if section == "corpus":
        return float
    cls = {"model": ModelConfig, "pretrain": PretrainConfig, "train": TrainConfig}[section]
    return next(f.type for f in dataclasses.fields(cls) if f.name == name)


def parse_config(text: str) -> dict[str, dict]:
    sections: dict[str, dict] = {"model": {}, "pretrain": {}, "train": {}, "corpus": {}}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        section, name = KEYS[key]
        try:
            sections[section][name] = _convert(raw, _field_type(section, name))
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
    return sections


def load_config(path: str | os.PathLike | None) -> dict[str, dict]:
    if path is None:
        return parse_config("")
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config not found: {path}")
    return parse_config(p.read_text())
