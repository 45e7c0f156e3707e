"""Flat ``dotted.key = value`` config files mapped onto nested frozen dataclasses.

Every leaf of the dataclass tree becomes one line. Value types are taken from
the default instance, so a file only has to mention the keys it overrides;
unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


def flatten(obj, prefix: str = "") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            out.update(flatten(value, key + "."))
        else:
            out[key] = value
    return out


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return "[" + ", ".join(format_value(v) for v in value) + "]"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_value(text: str, like, key: str):
    text = text.strip()
    try:
        if isinstance(like, bool):
            low = text.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        if isinstance(like, tuple):
            inner = text.strip("[]() ")
            items = [s for s in (p.strip() for p in inner.split(",")) if s]
            elem = like[0] if like else 0.0
            return tuple(parse_value(s, elem, key) for s in items)
        if isinstance(like, str):
            if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
                return text[1:-1]
            return text
    except ValueError:
        pass
    raise ConfigError(f"{key}: cannot parse {text!r} as {type(like).__name__}")


def parse_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def apply_overrides(obj, overrides: dict[str, Any]):
    """Return a copy of ``obj`` with dotted-key overrides (strings are parsed)."""
    known = flatten(obj)
    unknown = sorted(set(overrides) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    nested: dict[str, Any] = {}
    for key, value in overrides.items():
        if isinstance(value, str):
            value = parse_value(value, known[key], key)
        head, _, rest = key.partition(".")
        if rest:
            nested.setdefault(head, {})[rest] = value
        else:
            nested[head] = value
    changes = {}
    for name, value in nested.items():
        if isinstance(value, dict):
            changes[name] = apply_overrides(getattr(obj, name), value)
        else:
            changes[name] = value
    try:
        return dataclasses.replace(obj, **changes)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def dump_text(obj) -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, v in flatten(obj).items())


def load(path: str | Path, default):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return apply_overrides(default, parse_text(text))


def save(path: str | Path, obj) -> None:
    Path(path).write_text(dump_text(obj))
