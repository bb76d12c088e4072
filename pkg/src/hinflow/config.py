"""Configuration files: a strict JSON tree mirroring RunConfig plus paths.

Precedence is flags > file > defaults. Unknown keys are rejected so a typo
never silently falls back to a default. parse -> serialize -> parse is the
identity.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .planner import PlannerConfig
from .policy import PolicyConfig
from .trainloop import EvalConfig, OnlineConfig, RunConfig


@dataclass
class PathsConfig:
    data_dir: str = "runs/data"
    checkpoint_dir: str = "runs/checkpoints"
    report_dir: str = "runs/reports"


@dataclass
class FileConfig:
    run: RunConfig = field(default_factory=RunConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> "FileConfig":
        self.run.validate()
        return self


def _assign(obj, key: str, value, crumb: str):
    if not hasattr(obj, key):
        raise ConfigError(f"unknown config key {crumb}{key!r}")
    current = getattr(obj, key)
    if dataclasses.is_dataclass(current) and not isinstance(current, type):
        if not isinstance(value, dict):
            raise ConfigError(f"config key {crumb}{key!r} must be an object")
        _merge(current, value, f"{crumb}{key}.")
        return
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"config key {crumb}{key!r} must be a boolean")
    elif isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"config key {crumb}{key!r} must be an integer")
        value = int(value)
    elif isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key {crumb}{key!r} must be a number")
        value = float(value)
    elif isinstance(current, str):
        if not isinstance(value, str):
            raise ConfigError(f"config key {crumb}{key!r} must be a string")
    elif current is None:
        if value is not None and not isinstance(value, (int, float)):
            raise ConfigError(f"config key {crumb}{key!r} must be a number or null")
        if value is not None:
            value = int(value)
    setattr(obj, key, value)


def _merge(obj, data: dict, crumb: str = ""):
    for key, value in data.items():
        _assign(obj, key, value, crumb)


def config_to_dict(cfg: FileConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_from_dict(data: dict) -> FileConfig:
    cfg = FileConfig()
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    _merge(cfg, data)
    return cfg.validate()


def load_config(path=None, overrides: dict | None = None) -> FileConfig:
    """Defaults, optionally overlaid by a JSON file, then by override keys.

    Overrides use dotted keys relative to the root, e.g. "run.seed".
    """
    cfg = FileConfig()
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config root must be a JSON object")
        _merge(cfg, data)
    for dotted, value in (overrides or {}).items():
        obj = cfg
        parts = dotted.split(".")
        for part in parts[:-1]:
            if not hasattr(obj, part):
                raise ConfigError(f"unknown config key {dotted!r}")
            obj = getattr(obj, part)
        _assign(obj, parts[-1], value, ".".join(parts[:-1]) + "." if parts[:-1] else "")
    return cfg.validate()


def save_config(path, cfg: FileConfig) -> None:
    Path(path).write_text(
        json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
