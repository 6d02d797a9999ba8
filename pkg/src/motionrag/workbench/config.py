"""Flat ``key = value`` configuration files, validated against dataclasses.

Blank lines and ``#`` comments are ignored. Values are parsed according to
the dataclass field type; unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import typing


class ConfigError(ValueError):
    pass


def _parse(value: str, typ, key: str):
    origin = typing.get_origin(typ)
    if origin is typing.Union:
        args = [a for a in typing.get_args(typ) if a is not type(None)]
        if value in ("", "none", "None"):
            return None
        typ = args[0]
    try:
        if typ is bool:
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if typ is int:
            return int(value)
        if typ is float:
            return float(value)
        if typ is str:
            return value
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {typ.__name__}") from None
    raise ConfigError(f"{key}: unsupported field type {typ}")


def parse_lines(lines) -> dict[str, str]:
    out = {}
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {n}: expected 'key = value', got {raw.strip()!r}")
        out[key.strip()] = value.strip()
    return out


def build(cls, raw: dict[str, str], strict: bool = True):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if strict and unknown:
        raise ConfigError(f"unknown config keys for {cls.__name__}: {sorted(unknown)}")
    kwargs = {k: _parse(v, hints[k], k) for k, v in raw.items() if k in names}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def read_config(path, cls, overrides: dict | None = None, strict: bool = True):
    with open(path, encoding="utf-8") as fh:
        raw = parse_lines(fh)
    raw.update({k: str(v) for k, v in (overrides or {}).items()})
    return build(cls, raw, strict)


def write_config(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            fh.write(f"{f.name} = {'' if v is None else v}\n")
