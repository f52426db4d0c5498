"""Line-based key=value config files bound to dataclasses.

Lines are `key = value`; `#` starts a comment; unknown keys are rejected so
typos fail loudly instead of silently training with defaults.
"""

from __future__ import annotations

import dataclasses


class ConfigError(ValueError):
    pass


def _convert(raw: str, kind):
    if kind is bool:
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    return kind(raw)


_SCALARS = {"int": int, "float": float, "str": str, "bool": bool}


def parse_config(text: str, cls):
    """Build a dataclass instance of `cls` from key=value text."""
    types = {}
    for f in dataclasses.fields(cls):
        kind = _SCALARS.get(f.type, f.type) if isinstance(f.type, str) else f.type
        if kind not in (int, float, str, bool):
            raise ConfigError(f"unsupported config field type for {f.name!r}")
        types[f.name] = kind
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = (part.strip() for part in body.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _convert(raw, types[key])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from exc
    return cls(**values)


def load_config(path: str, cls, overrides: dict | None = None):
    with open(path) as f:
        cfg = parse_config(f.read(), cls)
    for key, value in (overrides or {}).items():
        if value is not None:
            setattr(cfg, key, value)
    return cfg


def format_config(cfg) -> str:
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in dataclasses.fields(cfg)]
    return "\n".join(lines) + "\n"
