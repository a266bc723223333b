"""Plain-text ``key=value`` (de)serialisation for the config dataclasses."""
from __future__ import annotations

import dataclasses
import types
import typing
from pathlib import Path

from .errors import ConfigError


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def to_text(cfg) -> str:
    """Canonical form: one ``key=value`` line per field, keys sorted."""
    items = sorted(dataclasses.asdict(cfg).items())
    return "".join(f"{k}={_format(v)}\n" for k, v in items)


def _parse(raw: str, tp, key: str):
    raw = raw.strip()
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if raw.lower() == "none":
            return None
        return _parse(raw, args[0], key)
    if origin is tuple:
        inner = typing.get_args(tp)[0]
        return tuple(_parse(p, inner, key) for p in raw.split(",") if p.strip())
    try:
        if tp is bool:
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is str:
            return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {tp.__name__}") from None
    raise ConfigError(f"{key}: unsupported field type {tp}")


def parse_lines(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def apply_overrides(cfg, overrides: dict[str, str]):
    """Return ``cfg`` with string-valued overrides parsed to the field types."""
    hints = typing.get_type_hints(type(cfg))
    changes = {}
    for key, raw in overrides.items():
        if key not in hints:
            raise ConfigError(f"unknown config key {key!r}")
        changes[key] = _parse(raw, hints[key], key)
    return dataclasses.replace(cfg, **changes)


def load_file(path) -> dict[str, str]:
    return parse_lines(Path(path).read_text())
