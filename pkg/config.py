"""Experiment configuration: one JSON file, one section per module config."""

import json
import logging
import os
from dataclasses import MISSING, dataclass, field, fields, replace
from pathlib import Path
from typing import List, Optional, Union

from agents import AgentConfig, ScheduleConfig
from encoder import EncoderConfig
from entropy import EstimatorConfig
from envs import PointMassConfig
from errors import ConfigError, InvalidArgument
from knn_graph import SearchConfig
from metrics import EvalConfig
from rewards import RewardConfig

logger = logging.getLogger(__name__)

OUTPUT_DIR_ENV = "ELEMENT_OUTPUT_DIR"
ENVIRONMENTS = ("maze", "pointmass")

SECTIONS = {
    "encoder": EncoderConfig,
    "estimator": EstimatorConfig,
    "reward": RewardConfig,
    "schedule": ScheduleConfig,
    "search": SearchConfig,
    "agent": AgentConfig,
    "pointmass": PointMassConfig,
    "evaluation": EvalConfig,
}

_SHARED = {
    "reward": {"beta": 0.5, "k_lifelong": 3},
    "schedule": {"U": 500_000, "T_u": 50_000, "total_steps": 2_000_000},
    "pointmass": {"episode_len": 1000},
}

# Per-environment hyper-parameter tables; explicit keys in a config win.
PRESETS = {
    "hopper": {**_SHARED, "estimator": {"name": "kde", "sigma": 1.0}, "search": {"R1": 20, "R2": 20, "depth": 2}},
    "walker": {**_SHARED, "estimator": {"name": "knn", "k": 5}, "search": {"R1": 10, "R2": 5, "depth": 2}},
    "ant": {**_SHARED, "estimator": {"name": "renyi", "sigma": 1.0, "alpha": 3.0}, "search": {"R1": 20, "R2": 10, "depth": 2}},
    "humanoid": {**_SHARED, "estimator": {"name": "renyi", "sigma": 1.0, "alpha": 3.0}, "search": {"R1": 20, "R2": 10, "depth": 2}},
}


@dataclass(frozen=True)
class ExperimentConfig:
    environment: str = "maze"
    maze_path: Optional[str] = None
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    pointmass: PointMassConfig = field(default_factory=PointMassConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    seeds: List[int] = field(default_factory=lambda: [0])
    output_dir: str = "runs/element"
    workers: int = 1
    preset: Optional[str] = None


def _type_error(value, expected, where):
    return ConfigError(f"expected {expected}, got {type(value).__name__} {value!r}", field=where)


def _check_value(value, default, where):
    """Match a JSON value against the type of the field's default."""
    if default is None:
        if value is not None and (isinstance(value, bool) or not isinstance(value, int)):
            raise _type_error(value, "an integer or null", where)
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise _type_error(value, "true or false", where)
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not float(value).is_integer():
            raise _type_error(value, "an integer", where)
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise _type_error(value, "a number", where)
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise _type_error(value, "a string", where)
        return value
    if isinstance(default, tuple):
        return _check_sequence(value, default, where, fixed_length=False)
    return value


def _check_sequence(value, default: tuple, where: str, fixed_length: bool) -> tuple:
    """Lists follow the default's nesting; nested entries keep the default's length."""
    if not isinstance(value, list):
        raise _type_error(value, "a list", where)
    if not default:
        return tuple(value)
    nested = isinstance(default[0], tuple)
    if (fixed_length or nested) and len(value) != len(default):
        raise ConfigError(f"expected {len(default)} entries, got {len(value)}", field=where)
    if nested:
        return tuple(_check_sequence(v, default[0], where, fixed_length=True) for v in value)
    return tuple(_check_value(v, default[0], where) for v in value)


def _field_default(f):
    if f.default is not MISSING:
        return f.default
    if f.default_factory is not MISSING:
        return f.default_factory()
    return None


def _build_section(name: str, cls, data) -> object:
    if not isinstance(data, dict):
        raise _type_error(data, "an object", name)
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        where = f"{name}.{key}"
        if key not in known:
            raise ConfigError("unknown key", field=where)
        kwargs[key] = _check_value(value, _field_default(known[key]), where)
    try:
        return cls(**kwargs)
    except InvalidArgument as exc:
        raise ConfigError(str(exc), field=f"{name}.{exc.field}" if exc.field else name) from exc
    except (TypeError, ValueError) as exc:
        key = next(iter(kwargs), None) if len(kwargs) == 1 else None
        raise ConfigError(str(exc), field=f"{name}.{key}" if key else name) from exc


def _merge(base: dict, override: dict) -> dict:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = {**merged[key], **value}
        else:
            merged[key] = value
    return merged


def parse_config(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("top level must be a JSON object")
    preset = data.get("preset")
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset '{preset}', choose from {sorted(PRESETS)}", field="preset")
        data = _merge(PRESETS[preset], data)

    top = {f.name: f for f in fields(ExperimentConfig)}
    kwargs = {}
    for key, value in data.items():
        if key not in top:
            raise ConfigError("unknown key", field=key)
        if key in SECTIONS:
            kwargs[key] = _build_section(key, SECTIONS[key], value)
        elif key == "seeds":
            if not isinstance(value, list) or not value:
                raise ConfigError("expected a non-empty list of integers", field="seeds")
            kwargs[key] = [_check_value(v, 0, f"seeds[{i}]") for i, v in enumerate(value)]
        elif key in ("maze_path", "preset"):
            if value is not None and not isinstance(value, str):
                raise _type_error(value, "a string or null", key)
            kwargs[key] = value
        else:
            kwargs[key] = _check_value(value, _field_default(top[key]), key)

    cfg = ExperimentConfig(**kwargs)
    if cfg.environment not in ENVIRONMENTS:
        raise ConfigError(f"'{cfg.environment}' is not one of {', '.join(ENVIRONMENTS)}", field="environment")
    if cfg.workers < 1:
        raise ConfigError("must be >= 1", field="workers")
    if len(set(cfg.seeds)) != len(cfg.seeds):
        raise ConfigError("seeds must be distinct", field="seeds")
    return cfg


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    """Read, validate and apply the ELEMENT_OUTPUT_DIR override."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror or exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc

    cfg = parse_config(data)
    override = os.getenv(OUTPUT_DIR_ENV)
    if override:
        logger.info("%s overrides output_dir %s -> %s", OUTPUT_DIR_ENV, cfg.output_dir, override)
        cfg = replace(cfg, output_dir=override)
    return cfg
