"""Flat ``key = value`` configuration files.

One setting per line, ``#`` starts a comment. Values are JSON literals
(``0.1``, ``true``, ``[1, 2]``, ``null``, ``"text"``); a bare word is read
as a string. The file must carry ``version = 1``. Unknown keys are rejected
and missing keys take their documented defaults.
"""
from __future__ import annotations

import dataclasses
import json
from pathlib import Path

from .errors import ConfigError
from .data import SyntheticGcdSpec
from .harness import ALIGN_MODES, TrainConfig

CONFIG_VERSION = 1


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Return ``{key: (value, line_number)}``; raises :class:`ConfigError` on bad lines."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.strip()
        if not body or body.startswith("#"):
            continue
        body = body.split(" #", 1)[0].strip()
        key, sep, raw = body.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'", line=lineno)
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key '{key}'", line=lineno, key=key)
        out[key] = (_parse_value(raw.strip()), lineno)
    return out


_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}
_OPTIONAL_INT = {"data_seed"}
_OPTIONAL_STR = {"dataset_path", "out_dir"}


def _coerce(key: str, value, where: str, line: int | None = None):
    default = _FIELDS[key].default
    if default is dataclasses.MISSING:
        default = _FIELDS[key].default_factory()
    try:
        if value is None and key in _OPTIONAL_INT | _OPTIONAL_STR:
            return None
        if key in _OPTIONAL_INT:
            if isinstance(value, bool) or not isinstance(value, int):
                raise TypeError
            return value
        if key in _OPTIONAL_STR:
            return str(value)
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise TypeError
            return value
        if isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise TypeError
            return float(value)
        if isinstance(default, tuple):
            if not isinstance(value, list):
                raise TypeError
            return tuple(int(v) for v in value)
        if isinstance(default, str):
            if not isinstance(value, str):
                raise TypeError
            return value
    except (TypeError, ValueError):
        pass
    else:
        return value
    raise ConfigError(f"{where}: bad value {value!r} for '{key}' (expected like {default!r})", line=line, key=key)


def build_config(entries: dict, overrides: dict | None = None, source: str = "<config>") -> TrainConfig:
    """Turn parsed entries plus command-line ``overrides`` (which win) into a config."""
    entries = dict(entries)
    version = entries.pop("version", (None, None))
    if version[0] != CONFIG_VERSION:
        raise ConfigError(
            f"{source}:{version[1] or 0}: version must be {CONFIG_VERSION}, got {version[0]!r}", line=version[1],
            key="version",
        )
    values = {}
    for key, (value, lineno) in entries.items():
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown key '{key}'", line=lineno, key=key)
        values[key] = _coerce(key, value, f"{source}:{lineno}", lineno)
    for key, value in (overrides or {}).items():
        if key not in _FIELDS:
            raise ConfigError(f"override: unknown key '{key}'", key=key)
        values[key] = _coerce(key, value, "override")
    if values.get("mode", "flipclass") not in ALIGN_MODES:
        raise ConfigError(f"{source}: mode must be one of {', '.join(ALIGN_MODES)}", key="mode")
    try:
        return TrainConfig(**values)
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def load_config(path, overrides: dict | None = None) -> TrainConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read ({exc.strerror})") from exc
    return build_config(parse_config_text(text, str(path)), overrides, str(path))


def parse_override(item: str) -> tuple[str, object]:
    key, sep, raw = item.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override '{item}' is not key=value")
    return key.strip(), _parse_value(raw.strip())


def dump_config(cfg: TrainConfig) -> str:
    """Render ``cfg`` in the file format; loading it back gives an equal config."""
    lines = [f"version = {CONFIG_VERSION}"]
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = list(value)
        lines.append(f"{f.name} = {json.dumps(value)}")
    return "\n".join(lines) + "\n"


def load_data_spec(path) -> SyntheticGcdSpec:
    """Read a dataset spec file: ``version = 1`` plus any :class:`SyntheticGcdSpec` fields."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read ({exc.strerror})") from exc
    entries = parse_config_text(text, str(path))
    version = entries.pop("version", (None, None))
    if version[0] != CONFIG_VERSION:
        raise ConfigError(f"{path}:{version[1] or 0}: version must be {CONFIG_VERSION}, got {version[0]!r}",
                          line=version[1], key="version")
    fields = {f.name for f in dataclasses.fields(SyntheticGcdSpec)}
    values = {}
    for key, (value, lineno) in entries.items():
        if key not in fields:
            raise ConfigError(f"{path}:{lineno}: unknown key '{key}'", line=lineno, key=key)
        values[key] = value
    try:
        return SyntheticGcdSpec(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
