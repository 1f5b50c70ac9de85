"""
Run configuration: flat `key = value` files and typed overrides of the
dataclass configs (Schedule, model configs, OracleConfig).

A key is either a bare field name, matched against the sections in order, or
`section.field`, e.g. `oracle.n_iterations = 2000`.
"""

from __future__ import annotations

import dataclasses
import os
from enum import Enum
from pathlib import Path
from typing import Any, Mapping, Optional

THREADS_ENV = "AGGREFUSE_THREADS"


class ConfigError(Exception):
    """Exception raised for malformed or unknown configuration."""

    def __init__(self, message: str) -> None:
        self.message = message
        super().__init__(self.message)


def load_config(path: str | Path) -> dict[str, str]:
    """Read `key = value` lines; `#` starts a comment."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from exc
    values: dict[str, str] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key or not value:
            raise ConfigError(f"{path}:{number}: expected `key = value`, got {raw.strip()!r}")
        if key in values:
            raise ConfigError(f"{path}:{number}: duplicate key {key!r}")
        values[key] = value
    return values


def _coerce(key: str, raw: Any, current: Any) -> Any:
    if not isinstance(raw, str) or isinstance(current, str):
        return raw
    try:
        match current:
            case bool():
                if raw.lower() not in ("true", "false"):
                    raise ValueError(raw)
                return raw.lower() == "true"
            case Enum():
                return type(current)(raw)
            case int():
                return int(raw)
            case float():
                return float(raw)
            case tuple():
                return tuple(float(v) for v in raw.split(","))
    except ValueError as exc:
        raise ConfigError(f"invalid value {raw!r} for {key}") from exc
    raise ConfigError(f"{key} cannot be set from a config file")


def apply_overrides(obj: Any, values: Mapping[str, Any]) -> Any:
    """
    A copy of the dataclass obj with fields replaced by values.

    String values are coerced to the type of the current field value.
    """
    names = {f.name for f in dataclasses.fields(obj)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown keys for {type(obj).__name__}: {', '.join(unknown)}")
    changes = {k: _coerce(k, v, getattr(obj, k)) for k, v in values.items()}
    try:
        return dataclasses.replace(obj, **changes)
    except Exception as exc:
        # Config classes validate in __post_init__ with their own error types.
        raise ConfigError(f"invalid {type(obj).__name__}: {exc}") from exc


def route_overrides(values: Mapping[str, Any], sections: Mapping[str, Any]) -> dict[str, Any]:
    """
    Apply every key to its section; returns the updated section objects.

    Bare keys go to the first section that has the field.
    """
    routed: dict[str, dict[str, Any]] = {name: {} for name in sections}
    for key, value in values.items():
        section, dot, field = key.partition(".")
        if dot:
            if section not in sections:
                raise ConfigError(f"unknown section {section!r} in key {key!r}")
            routed[section][field] = value
            continue
        for name, obj in sections.items():
            if key in {f.name for f in dataclasses.fields(obj)}:
                routed[name][key] = value
                break
        else:
            raise ConfigError(f"unknown key {key!r}")
    return {name: apply_overrides(sections[name], routed[name]) for name in sections}


def threads_from_env(env: Optional[Mapping[str, str]] = None) -> Optional[int]:
    """Thread cap from AGGREFUSE_THREADS, or None when unset."""
    env = os.environ if env is None else env
    raw = env.get(THREADS_ENV)
    if raw is None or raw == "":
        return None
    try:
        threads = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from exc
    if threads < 1:
        raise ConfigError(f"{THREADS_ENV} must be positive, got {threads}")
    return threads
