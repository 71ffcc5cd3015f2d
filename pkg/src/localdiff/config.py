"""Run configuration: TOML file with sections, flag overrides, defaults.

Precedence is defaults < config file < ``--set section.key=value`` flags.
Unknown keys are rejected so typos fail loudly, and the ``defaults``
command output parses back into a valid configuration.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .errors import ValidationError
from .guidance import GuidanceConfig

__all__ = ["RunConfig", "load_config", "dump_toml", "config_hash",
           "apply_overrides"]


@dataclass
class DataSection:
    seed: int = 0
    count: int = 16
    dilation: int = 10


@dataclass
class ScheduleSection:
    train_steps: int = 200
    inference_steps: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.1


@dataclass
class ModelSection:
    channels: tuple = (16, 32, 48)
    dtype: str = "float32"
    init_seed: int = 0


@dataclass
class TrainSection:
    steps: int = 12000
    control_steps: int = 3000
    batch_size: int = 32
    lr: float = 2e-3
    seed: int = 0
    dataset_seed: int = 0
    dataset_size: int = 4096
    checkpoint_every: int = 1000


@dataclass
class SampleSection:
    mode: str = "full_method"
    prompt: tuple = ("circle", "square")
    condition: str = ""
    mask: str = ""
    checkpoint: str = ""
    seeds: tuple = (0,)


@dataclass
class EvalSection:
    seeds: tuple = (0, 1)
    scenario_seed: int = 0
    n_scenarios: int = 1
    modes: tuple = ("naive", "noise_mask", "feature_mask", "full_method")
    toggles: tuple = ("none", "rdloss", "fmc", "rdloss+fmc", "rdloss+ftr",
                      "rdloss+ftr+fmc")


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs"
    jobs: int = 1
    data: DataSection = field(default_factory=DataSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    sample: SampleSection = field(default_factory=SampleSection)
    eval: EvalSection = field(default_factory=EvalSection)


_SECTIONS = {f.name: f for f in fields(RunConfig)
             if f.default_factory is not dataclasses.MISSING}


def _coerce(value, default):
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ValidationError(f"expected an array, got {value!r}")
        return tuple(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ValidationError(f"expected a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValidationError(f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ValidationError(f"expected a string, got {value!r}")
        return value
    raise ValidationError(f"unsupported config value {value!r}")


def _apply_section(obj, data: dict, section: str):
    known = {f.name for f in fields(obj)}
    for key, value in data.items():
        if key not in known:
            raise ValidationError(f"unknown key {section}.{key}")
        current = getattr(obj, key)
        setattr(obj, key, _coerce(value, current))
    return obj


def load_config(path=None, overrides=()) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        with open(path, "rb") as f:
            try:
                data = tomllib.load(f)
            except tomllib.TOMLDecodeError as e:
                raise ValidationError(f"bad config file: {e}") from None
        for key, value in data.items():
            if key in _SECTIONS:
                if not isinstance(value, dict):
                    raise ValidationError(f"section [{key}] must be a table")
                _apply_section(getattr(cfg, key), value, key)
            elif key in ("seed", "output_dir", "jobs"):
                setattr(cfg, key, _coerce(value, getattr(cfg, key)))
            else:
                raise ValidationError(f"unknown key {key}")
    cfg = apply_overrides(cfg, overrides)
    _validate(cfg)
    return cfg


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    """Apply ``section.key=value`` (or ``key=value``) override strings."""
    for item in overrides:
        if "=" not in item:
            raise ValidationError(f"override {item!r} is not key=value")
        key, _, raw = item.partition("=")
        try:
            value = tomllib.loads(f"v = {raw}")["v"]
        except tomllib.TOMLDecodeError:
            value = raw  # bare strings allowed without quotes
        parts = key.strip().split(".")
        if len(parts) == 1:
            if parts[0] not in ("seed", "output_dir", "jobs"):
                raise ValidationError(f"unknown key {parts[0]}")
            setattr(cfg, parts[0], _coerce(value, getattr(cfg, parts[0])))
        elif len(parts) == 2 and parts[0] in _SECTIONS:
            _apply_section(getattr(cfg, parts[0]), {parts[1]: value}, parts[0])
        else:
            raise ValidationError(f"unknown key {key}")
    return cfg


def _validate(cfg: RunConfig) -> None:
    if cfg.schedule.inference_steps > cfg.schedule.train_steps:
        raise ValidationError("inference_steps cannot exceed train_steps")
    if cfg.model.dtype not in ("float32", "float64"):
        raise ValidationError(f"unsupported dtype {cfg.model.dtype!r}")
    if cfg.jobs < 1:
        raise ValidationError("jobs must be >= 1")
    GuidanceConfig(**dataclasses.asdict(cfg.guidance))  # range checks


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (tuple, list)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise ValidationError(f"cannot serialize {v!r}")


def dump_toml(cfg: RunConfig) -> str:
    lines = []
    for name in ("seed", "output_dir", "jobs"):
        lines.append(f"{name} = {_toml_value(getattr(cfg, name))}")
    for section in _SECTIONS:
        lines.append("")
        lines.append(f"[{section}]")
        obj = getattr(cfg, section)
        for f in fields(obj):
            lines.append(f"{f.name} = {_toml_value(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig) -> str:
    blob = json.dumps(dataclasses.asdict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()
