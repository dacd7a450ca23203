"""JSON configuration for the command line tools.

A config file is one JSON object with optional sections; every key has a
default, so ``{}`` (or no file at all) is a valid configuration:

    {
      "model":         {"num_layers": 4, "num_heads": 2, "head_dim": 8,
                        "vocab_size": 1024, "rope_base": 10000.0,
                        "weight_seed": 42},
      "workload":      {"num_agents": 5, "num_rounds": 3, "history_len": 32,
                        "shared_block_len": 16, "token_seed": 7,
                        "permutation_seed": 11},
      "pic":           {"recompute_fraction": 0.15, "check_layer": 1},
      "blocks":        {"block_size": 32},
      "pool":          {"capacity_tokens": 4096},
      "segment_index": {"budget_bytes": 67108864},
      "harness":       {"paths": ["T1", "T2", "T3"],
                        "concurrent_groups": false, "restore_shift": 16}
    }

``history_len`` accepts one integer or a per-agent list; ``permutation_seed``
accepts null for identity output order. Unknown sections or keys are errors
that name the offending dotted key.
"""
from __future__ import annotations

import json
from typing import Optional, Sequence

from .core import CacheBlockConfig, ModelConfig
from .pic import PicConfig
from .trace import PATHS, SimulationSpec
from .workload import WorkloadSpec


class ConfigError(ValueError):
    """A malformed configuration; ``key`` is the dotted path that failed."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _section(data: dict, name: str) -> dict:
    raw = data.get(name, {})
    if not isinstance(raw, dict):
        raise ConfigError(name, "must be a JSON object")
    return dict(raw)


def _reject_unknown(section: dict, name: str) -> None:
    for key in section:
        raise ConfigError(f"{name}.{key}", "unknown key")


def _pop_int(section: dict, name: str, key: str, default: int) -> int:
    value = section.pop(key, default)
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{name}.{key}", "must be an integer")
    return value


def _pop_float(section: dict, name: str, key: str, default: float) -> float:
    value = section.pop(key, default)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{name}.{key}", "must be a number")
    return float(value)


def _pop_bool(section: dict, name: str, key: str, default: bool) -> bool:
    value = section.pop(key, default)
    if not isinstance(value, bool):
        raise ConfigError(f"{name}.{key}", "must be true or false")
    return value


def _pop_optional_int(section: dict, name: str, key: str, default) -> Optional[int]:
    value = section.pop(key, default)
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{name}.{key}", "must be an integer or null")
    return value


def _pop_history(section: dict, name: str, key: str, default):
    value = section.pop(key, default)
    if isinstance(value, bool):
        raise ConfigError(f"{name}.{key}", "must be an integer or a list of integers")
    if isinstance(value, int):
        return value
    if isinstance(value, (list, tuple)) and all(
        isinstance(v, int) and not isinstance(v, bool) for v in value
    ):
        return tuple(value)
    raise ConfigError(f"{name}.{key}", "must be an integer or a list of integers")


def _pop_paths(section: dict, name: str, key: str) -> tuple[str, ...]:
    value = section.pop(key, list(PATHS))
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise ConfigError(f"{name}.{key}", "must be a list of path names")
    if not value:
        raise ConfigError(f"{name}.{key}", "must name at least one path")
    for v in value:
        if v not in PATHS:
            raise ConfigError(f"{name}.{key}", f"unknown path {v!r}")
    if len(set(value)) != len(value):
        raise ConfigError(f"{name}.{key}", "paths must be unique")
    return tuple(value)


def build_spec(data: dict) -> tuple[SimulationSpec, tuple[str, ...]]:
    """Validate a parsed config object and resolve it against the defaults."""
    if not isinstance(data, dict):
        raise ConfigError("<root>", "configuration must be a JSON object")
    known = {"model", "workload", "pic", "blocks", "pool", "segment_index", "harness"}
    for key in data:
        if key not in known:
            raise ConfigError(key, "unknown configuration section")

    sec = _section(data, "model")
    try:
        model = ModelConfig(
            num_layers=_pop_int(sec, "model", "num_layers", 4),
            num_heads=_pop_int(sec, "model", "num_heads", 2),
            head_dim=_pop_int(sec, "model", "head_dim", 8),
            vocab_size=_pop_int(sec, "model", "vocab_size", 1024),
            rope_base=_pop_float(sec, "model", "rope_base", 10000.0),
            weight_seed=_pop_int(sec, "model", "weight_seed", 42),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("model", str(exc)) from exc
    _reject_unknown(sec, "model")

    sec = _section(data, "workload")
    try:
        workload = WorkloadSpec(
            num_agents=_pop_int(sec, "workload", "num_agents", 5),
            num_rounds=_pop_int(sec, "workload", "num_rounds", 3),
            history_len=_pop_history(sec, "workload", "history_len", 32),
            shared_block_len=_pop_int(sec, "workload", "shared_block_len", 16),
            token_seed=_pop_int(sec, "workload", "token_seed", 7),
            permutation_seed=_pop_optional_int(sec, "workload", "permutation_seed", 11),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("workload", str(exc)) from exc
    _reject_unknown(sec, "workload")

    sec = _section(data, "pic")
    try:
        pic = PicConfig(
            recompute_fraction=_pop_float(sec, "pic", "recompute_fraction", 0.15),
            check_layer=_pop_int(sec, "pic", "check_layer", 1),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("pic", str(exc)) from exc
    _reject_unknown(sec, "pic")

    sec = _section(data, "blocks")
    try:
        blocks = CacheBlockConfig(block_size=_pop_int(sec, "blocks", "block_size", 32))
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("blocks", str(exc)) from exc
    _reject_unknown(sec, "blocks")

    sec = _section(data, "pool")
    capacity = _pop_int(sec, "pool", "capacity_tokens", 4096)
    _reject_unknown(sec, "pool")

    sec = _section(data, "segment_index")
    budget = _pop_int(sec, "segment_index", "budget_bytes", 64 * 1024 * 1024)
    _reject_unknown(sec, "segment_index")

    sec = _section(data, "harness")
    paths = _pop_paths(sec, "harness", "paths")
    concurrent = _pop_bool(sec, "harness", "concurrent_groups", False)
    restore_shift = _pop_int(sec, "harness", "restore_shift", 16)
    _reject_unknown(sec, "harness")

    try:
        spec = SimulationSpec(
            model=model,
            workload=workload,
            pic=pic,
            blocks=blocks,
            pool_capacity_tokens=capacity,
            index_budget_bytes=budget,
            concurrent_groups=concurrent,
            restore_shift=restore_shift,
        )
    except ValueError as exc:
        raise ConfigError("<root>", str(exc)) from exc
    return spec, paths


def load_config(path: Optional[str]) -> tuple[SimulationSpec, tuple[str, ...]]:
    """Load a config file, or the defaults when ``path`` is None."""
    if path is None:
        return build_spec({})
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError("<file>", f"invalid JSON: {exc}") from exc
    return build_spec(data)
