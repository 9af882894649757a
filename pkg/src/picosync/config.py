"""Flat ``section.key = value`` config files.

Blank lines and ``#`` comments are ignored. Keys are dotted paths into a
nested dataclass (``channel_1.drift.amplitude_fs = 5000``); the value is
coerced to the type of the field it replaces. ``run.<name>`` addresses a
top-level field.
"""

from __future__ import annotations

import dataclasses
import math
from enum import Enum

from .source import ConfigError

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def parse_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key or not value:
            raise ConfigError(f"line {lineno}: empty key or value")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def parse_file(path) -> dict[str, str]:
    with open(path) as fh:
        return parse_text(fh.read())


def _coerce(current, text: str, key: str):
    low = text.lower()
    try:
        if isinstance(current, bool):
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if isinstance(current, Enum):
            return type(current)(low)
        if isinstance(current, int):
            f = float(text)
            if not f.is_integer():
                raise ValueError(text)
            return int(text) if text.lstrip("+-").isdigit() else int(f)
        if isinstance(current, float) or current is None:
            if low in ("none", "null") and current is None:
                return None
            return float(text)
        if isinstance(current, str):
            return text
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r}") from exc
    raise ConfigError(f"{key}: field of type {type(current).__name__} is not settable from text")


def apply_overrides(obj, overrides: dict[str, str]):
    """Return a copy of dataclass ``obj`` with the dotted overrides applied."""
    grouped: dict[str, dict] = {}
    direct: dict[str, str] = {}
    for key, value in overrides.items():
        if key.startswith("run."):
            key = key[4:]
        head, _, rest = key.partition(".")
        if rest:
            grouped.setdefault(head, {})[rest] = value
        else:
            direct[head] = value
    names = {f.name for f in dataclasses.fields(obj)}
    changes = {}
    for name, value in direct.items():
        if name not in names:
            raise ConfigError(f"unknown key {name!r}")
        current = getattr(obj, name)
        if dataclasses.is_dataclass(current):
            raise ConfigError(f"{name!r} is a section, not a value")
        changes[name] = _coerce(current, value, name)
    for name, sub in grouped.items():
        if name not in names or not dataclasses.is_dataclass(getattr(obj, name)):
            raise ConfigError(f"unknown section {name!r}")
        changes[name] = apply_overrides(getattr(obj, name), sub)
    try:
        return dataclasses.replace(obj, **changes)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def flatten(obj, prefix: str = "") -> dict:
    """Dotted ``key -> value`` view of a nested dataclass (for echoing)."""
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(v):
            out.update(flatten(v, key + "."))
        elif isinstance(v, Enum):
            out[key] = v.value
        elif isinstance(v, tuple):
            out[key] = [flatten(c) if dataclasses.is_dataclass(c) else c for c in v]
        elif isinstance(v, float) and not math.isfinite(v):
            out[key] = str(v)
        else:
            out[key] = v
    return out
