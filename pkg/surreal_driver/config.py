"""Structured configuration: JSON file sections, environment defaults and `--section.field` overrides."""

import argparse
import json
import typing
from dataclasses import fields, replace
from pathlib import Path
from typing import Any, Dict, Optional

from .env import SURREAL_LLM_ENDPOINT, SURREAL_LLM_MODEL, SURREAL_LLM_TIMEOUT
from .errors import ConfigError
from .types import (
    AgentConfig,
    AppConfig,
    BehaviorProfile,
    CoachThresholds,
    PedestrianProfile,
    PolicyTable,
    ReasonerConfig,
    SafetyConfig,
    SimConfig,
)

SECTIONS: Dict[str, type] = {
    "sim": SimConfig,
    "npc": BehaviorProfile,
    "pedestrians": PedestrianProfile,
    "safety": SafetyConfig,
    "agent": AgentConfig,
    "policy": PolicyTable,
    "reasoner": ReasonerConfig,
    "coach": CoachThresholds,
}

# safety fields that follow the simulator unless the file sets them
_SYNCED_SAFETY_FIELDS = ("decel", "dt")


def _base_type(hint: Any) -> type:
    origin = typing.get_origin(hint)
    if origin is typing.Literal:
        return type(typing.get_args(hint)[0])
    if origin is typing.Union:
        return next(a for a in typing.get_args(hint) if a is not type(None))
    return hint


def _check_value(section: str, name: str, hint: Any, value: Any) -> Any:
    where = f"{section}.{name}"
    if value is None:
        if type(None) in typing.get_args(hint):
            return None
        raise ConfigError(f"{where} may not be null")
    base = _base_type(hint)
    if base is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean, got {value!r}")
    elif base is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
    elif base is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        value = float(value)
    elif base is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}")
    if typing.get_origin(hint) is typing.Literal and value not in typing.get_args(hint):
        raise ConfigError(f"{where} must be one of {', '.join(map(str, typing.get_args(hint)))}")
    return value


def _build_section(name: str, cls: type, data: Any, base: Any) -> Any:
    if not isinstance(data, dict):
        raise ConfigError(f"section {name!r} must be an object")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {name!r}: {', '.join(unknown)}")
    values = {key: _check_value(name, key, hints[key], value) for key, value in data.items()}
    return replace(base, **values)


def env_reasoner_defaults() -> ReasonerConfig:
    try:
        timeout = float(SURREAL_LLM_TIMEOUT)
        return ReasonerConfig(endpoint=SURREAL_LLM_ENDPOINT, model=SURREAL_LLM_MODEL, timeout=timeout)
    except ValueError as e:
        raise ConfigError(f"SURREAL_LLM_TIMEOUT={SURREAL_LLM_TIMEOUT!r}: {e}")


def config_from_dict(data: Dict[str, Any], use_env: bool = False) -> AppConfig:
    """Build an AppConfig from JSON sections. Any problem surfaces as ConfigError."""
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a JSON object")
    unknown = sorted(set(data) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown configuration section(s): {', '.join(unknown)}")

    defaults = AppConfig()
    if use_env:
        defaults = replace(defaults, reasoner=env_reasoner_defaults())
    try:
        built = {
            name: _build_section(name, cls, data.get(name, {}), getattr(defaults, name))
            for name, cls in SECTIONS.items()
        }
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e))
    sim = built["sim"]
    explicit = data.get("safety", {})
    synced = {f: getattr(sim, f) for f in _SYNCED_SAFETY_FIELDS if f not in explicit}
    try:
        built["safety"] = replace(built["safety"], **synced)
    except ValueError as e:
        raise ConfigError(str(e))
    return AppConfig(**built)


def load_config(path: Optional[str | Path] = None, overrides: Optional[Dict[str, Any]] = None) -> AppConfig:
    data: Dict[str, Any] = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}")
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must contain a JSON object")
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        data.setdefault(section, {})
        if not isinstance(data[section], dict):
            raise ConfigError(f"section {section!r} must be an object")
        data[section][key] = value
    return config_from_dict(data, use_env=True)


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def add_override_arguments(parser: argparse.ArgumentParser) -> None:
    """Add one `--section.field` option per configuration field."""
    group = parser.add_argument_group("configuration overrides")
    for section, cls in SECTIONS.items():
        hints = typing.get_type_hints(cls)
        for f in fields(cls):
            base = _base_type(hints[f.name])
            converter = _parse_bool if base is bool else base
            group.add_argument(
                f"--{section}.{f.name}",
                dest=f"{section}.{f.name}",
                type=converter,
                default=None,
                metavar=base.__name__.upper(),
            )


def collect_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    return {
        key: value
        for key, value in vars(args).items()
        if "." in key and key.partition(".")[0] in SECTIONS and value is not None
    }
