"""Experiment configuration: flat INI files over typed sections.

An empty file (or no file) resolves to the library defaults.  Unknown
sections or keys are rejected by name, values are converted according to
the dataclass field types, and every constraint violation reports the
offending ``[section] key``.  ``save_config`` echoes the fully resolved
configuration, which is sufficient to reproduce a run byte-for-byte.
"""

from __future__ import annotations

import configparser
import types
import typing
from dataclasses import dataclass, field, fields, replace

from .br import BrConfig, CacheConfig, MetaConfig
from .env import EnvConfig
from .game import DoConfig


class ConfigError(ValueError):
    """Raised for unparseable, unknown, or invalid configuration input."""


SECTION_CLASSES = {
    "env": EnvConfig,
    "br": BrConfig,
    "meta": MetaConfig,
    "cache": CacheConfig,
    "do": DoConfig,
}

RUN_KEYS = {"seed": int, "seeds": int, "out_dir": str}

_BOOL_STATES = {"true": True, "yes": True, "on": True, "1": True,
                "false": False, "no": False, "off": False, "0": False}


@dataclass
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    br: BrConfig = field(default_factory=BrConfig)
    meta: MetaConfig = field(default_factory=MetaConfig)
    cache: CacheConfig = field(default_factory=CacheConfig)
    do: DoConfig = field(default_factory=DoConfig)
    seed: int = 0
    seeds: int = 2
    out_dir: str = "runs"

    def validate(self):
        if self.seeds < 1:
            raise ConfigError(f"[run] seeds: must be >= 1, got {self.seeds}")
        for section in ("br", "meta", "cache", "do"):
            try:
                getattr(self, section).validate()
            except ValueError as exc:
                raise ConfigError(f"[{section}] {exc}") from exc
        try:
            self.env.validate()
        except ValueError as exc:
            raise ConfigError(f"[env] {exc}") from exc
        return self


def default_config() -> RunConfig:
    return RunConfig()


def _convert(raw: str, target_type, section: str, key: str):
    raw = raw.strip()
    origin = typing.get_origin(target_type)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(target_type) if a is not type(None)]
        if raw.lower() in ("none", ""):
            return None
        target_type = args[0]
    try:
        if target_type is bool:
            state = _BOOL_STATES.get(raw.lower())
            if state is None:
                raise ValueError(f"not a boolean: {raw!r}")
            return state
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        if target_type is str:
            return raw
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from exc
    raise ConfigError(f"[{section}] {key}: unsupported field type {target_type}")


def _parse_section(parser: configparser.ConfigParser, section: str,
                   cls) -> dict:
    hints = typing.get_type_hints(cls)
    known = {f.name: hints[f.name] for f in fields(cls)}
    values = {}
    for key, raw in parser.items(section):
        if key not in known:
            raise ConfigError(f"unknown key '{key}' in section [{section}]")
        values[key] = _convert(raw, known[key], section, key)
    return values


def load_config(path: str | None = None) -> RunConfig:
    """Parse ``path`` into a :class:`RunConfig`; ``None`` gives defaults.

    Parse errors surface with the offending line; unknown sections or
    keys, type mismatches, and constraint violations raise
    :class:`ConfigError` naming the field.
    """
    config = RunConfig()
    if path is None:
        return config.validate()
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc

    for section in parser.sections():
        if section == "run":
            for key, raw in parser.items("run"):
                if key not in RUN_KEYS:
                    raise ConfigError(f"unknown key '{key}' in section [run]")
                setattr(config, key, _convert(raw, RUN_KEYS[key], "run", key))
            continue
        cls = SECTION_CLASSES.get(section)
        if cls is None:
            raise ConfigError(f"unknown section [{section}]")
        values = _parse_section(parser, section, cls)
        try:
            setattr(config, section, replace(getattr(config, section), **values))
        except ValueError as exc:
            raise ConfigError(f"[{section}] {exc}") from exc
    return config.validate()


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def save_config(config: RunConfig, path: str):
    """Echo the fully resolved configuration as INI, every key explicit."""
    lines = ["[run]"]
    for key in sorted(RUN_KEYS):
        lines.append(f"{key} = {_format(getattr(config, key))}")
    for section in sorted(SECTION_CLASSES):
        lines.append("")
        lines.append(f"[{section}]")
        obj = getattr(config, section)
        for f in fields(type(obj)):
            lines.append(f"{f.name} = {_format(getattr(obj, f.name))}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
