"""Flat ``key=value`` configuration with typed defaults.

Defaults come from dataclass fields (prefixed, e.g. ``ibot.epochs``) or plain
values; a config file and command-line overrides are layered on top in that
order. Every value is coerced to the type of its default.
"""
from __future__ import annotations

import os
from dataclasses import fields
from typing import Any, Iterable, Mapping

from gridslide.errors import ConfigError


class UnknownKeyError(ConfigError):
    def __init__(self, key: str, valid: Iterable[str]):
        self.key = key
        self.valid = sorted(valid)
        super().__init__(f"unknown config key {key!r}; valid keys: {', '.join(self.valid)}")


def flatten(obj, prefix: str) -> dict[str, Any]:
    """Dataclass instance -> {prefix.field: value}; tuple fields are kept as tuples."""
    return {f"{prefix}.{f.name}": getattr(obj, f.name) for f in fields(obj)}


def section(cfg: Mapping[str, Any], prefix: str) -> dict[str, Any]:
    """Strip ``prefix.`` from every matching key."""
    p = prefix + "."
    return {k[len(p):]: v for k, v in cfg.items() if k.startswith(p)}


def build(cls, cfg: Mapping[str, Any], prefix: str, **override):
    """Instantiate dataclass ``cls`` from the ``prefix.*`` keys of a resolved config."""
    names = {f.name for f in fields(cls)}
    kw = {k: v for k, v in section(cfg, prefix).items() if k in names}
    kw.update(override)
    return cls(**kw)


def coerce(key: str, raw: str, default: Any) -> Any:
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [x for x in raw.replace(" ", "").split(",") if x]
            kind = type(default[0]) if default else float
            return tuple(kind(x) for x in items)
    except ValueError:
        raise ConfigError(f"cannot parse {key}={raw!r} as {type(default).__name__}") from None
    return raw


def format_value(v: Any) -> str:
    if isinstance(v, tuple):
        return ",".join(format_value(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_lines(lines: Iterable[str], source: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def read_file(path: str | os.PathLike) -> dict[str, str]:
    with open(path, encoding="utf-8") as fh:
        return parse_lines(fh, str(path))


def resolve(defaults: Mapping[str, Any], file_values: Mapping[str, str] | None = None,
            flag_values: Mapping[str, str] | None = None) -> dict[str, Any]:
    """defaults < file < flags; unknown keys raise :class:`UnknownKeyError`."""
    cfg = dict(defaults)
    for layer in (file_values or {}, flag_values or {}):
        for k, raw in layer.items():
            if k not in defaults:
                raise UnknownKeyError(k, defaults)
            cfg[k] = coerce(k, raw, defaults[k]) if isinstance(raw, str) else raw
    return cfg


def dump(cfg: Mapping[str, Any]) -> str:
    return "".join(f"{k}={format_value(cfg[k])}\n" for k in sorted(cfg))

