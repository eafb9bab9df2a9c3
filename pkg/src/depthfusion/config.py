"""Flat key = value configuration files with section prefixes.

A config file addresses every scene and training field through dotted
paths, e.g.::

    scene.h = 64
    scene.artifacts.count_max = 3
    train.lr = 0.001
    train.weights.w3 = 1.0
    model.guidance_skip = true
    model.global_widths = 16,32,64,128

Command-line ``--set key=value`` overrides take precedence over file
values. Values are cast to the type of the dataclass field they land on.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path


class ConfigError(ValueError):
    """Malformed config file or unknown/invalid key."""


# spec'd shorthand aliases
_ALIASES = {
    "train.lr": "train.learning_rate",
    "scene.height": "scene.h",
    "scene.width": "scene.w",
}


def parse_config_file(path) -> dict:
    """Read ``key = value`` lines; '#' starts a comment; blank lines ignored."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    entries = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()
    return entries


def _cast(value: str, target_type, key: str):
    try:
        if target_type is bool:
            low = value.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {value!r}")
        if target_type is int:
            return int(value)
        if target_type is float:
            return float(value)
        if target_type is tuple:
            return tuple(int(v) if v.strip().lstrip("-").isdigit() else float(v)
                         for v in value.split(","))
        return value
    except ValueError as e:
        raise ConfigError(f"{key}: {e}") from None


def apply_settings(roots: dict, settings: dict) -> None:
    """Set dotted keys on a map of root dataclass instances, with casting.

    ``roots`` maps section names ("scene", "train", "model") to dataclass
    instances; nested dataclass fields are traversed by further dots.
    """
    for key, value in settings.items():
        key = _ALIASES.get(key, key)
        parts = key.split(".")
        if parts[0] not in roots:
            raise ConfigError(f"unknown config section {parts[0]!r} in {key!r} "
                              f"(have: {', '.join(sorted(roots))})")
        obj = roots[parts[0]]
        for attr in parts[1:-1]:
            if not hasattr(obj, attr):
                raise ConfigError(f"unknown config key {key!r}")
            obj = getattr(obj, attr)
        leaf = parts[-1]
        fields = {f.name: f for f in dataclasses.fields(obj)} if dataclasses.is_dataclass(obj) else {}
        if leaf not in fields:
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(obj, leaf)
        target_type = type(current) if current is not None else str
        if dataclasses.is_dataclass(current):
            raise ConfigError(f"{key!r} is a section, not a value")
        setattr(obj, leaf, _cast(value, target_type, key))


def flatten(roots: dict) -> dict:
    """Dotted-path view of every field, for echoing effective configs."""
    out = {}

    def walk(prefix: str, obj):
        for f in dataclasses.fields(obj):
            val = getattr(obj, f.name)
            key = f"{prefix}.{f.name}"
            if dataclasses.is_dataclass(val) and not isinstance(val, type):
                walk(key, val)
            elif isinstance(val, tuple):
                out[key] = ",".join(str(v) for v in val)
            else:
                out[key] = val
    for name, obj in roots.items():
        if dataclasses.is_dataclass(obj):
            walk(name, obj)
    return out


def echo_lines(roots: dict) -> str:
    flat = flatten(roots)
    return "\n".join(f"{k} = {flat[k]}" for k in sorted(flat)) + "\n"
