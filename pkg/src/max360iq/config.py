"""Run configuration: one JSON file merging train/backbone/head settings,
with dotted-key command-line overrides."""

from __future__ import annotations

import json
from dataclasses import dataclass, fields, asdict
from pathlib import Path

from .backbone import BackboneConfig
from .head import HeadConfig
from .trainer import TrainConfig


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    train: TrainConfig
    backbone: BackboneConfig
    head: HeadConfig

    def to_dict(self) -> dict:
        return {"train": asdict(self.train), "backbone": asdict(self.backbone),
                "head": asdict(self.head)}


_SECTIONS = {"train": TrainConfig, "backbone": BackboneConfig, "head": HeadConfig}


def _coerce(cls, key: str, value):
    valid = {f.name for f in fields(cls)}
    if key not in valid:
        raise ConfigError(f"unknown key {key!r} for section "
                          f"{cls.__name__}; valid: {sorted(valid)}")
    if isinstance(value, list):
        return tuple(value)
    return value


def load_run_config(path: str | Path | None = None,
                    overrides: list[str] | None = None) -> RunConfig:
    """Build a RunConfig from an optional JSON file plus ``section.key=value``
    overrides (values parsed as JSON, falling back to bare strings)."""
    raw: dict[str, dict] = {"train": {}, "backbone": {}, "head": {}}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from e
        for section, values in data.items():
            if section not in _SECTIONS:
                raise ConfigError(f"{path}: unknown section {section!r}")
            if not isinstance(values, dict):
                raise ConfigError(f"{path}: section {section!r} must be a table")
            raw[section].update(values)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must be section.key=value")
        dotted, _, text = item.partition("=")
        if "." not in dotted:
            raise ConfigError(f"override key {dotted!r} must be section.key")
        section, _, key = dotted.partition(".")
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section {section!r} in override {item!r}")
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        raw[section][key] = value
    built = {}
    for section, cls in _SECTIONS.items():
        kwargs = {k: _coerce(cls, k, v) for k, v in raw[section].items()}
        try:
            built[section] = cls(**kwargs)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad {section} config: {e}") from e
    return RunConfig(**built)
