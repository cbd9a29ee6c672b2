"""Run configuration: nested dataclasses addressed by dotted keys.

A config file (YAML or JSON) may be nested (``da: {epochs: 15}``) or flat
(``da.epochs: 15``). Overrides use the same dotted paths. Unknown keys and
values of the wrong type are rejected.
"""
from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .evaluation import ProbeConfig
from .stages import StageConfig


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSpec:
    name: str = "desk"
    seed: int = 0
    num_classes: int = 10
    sizes: list[int] = field(default_factory=lambda: [2000, 2000, 1000])
    image_size: int = 16
    texture_amplitude: float = 0.3
    texture_contrast: float = 1.0
    texture_dir: str | None = None
    mnist_dir: str | None = None
    usps_dir: str | None = None
    cache_dir: str | None = None


@dataclass
class SynthesisSpec:
    pool_size: int | None = None
    pairing: str = "random"
    policy: str = "replace"
    grid_size: int = 8


@dataclass
class Seeds:
    init: int = 0
    data: int = 0
    pairing: int = 0


@dataclass
class RunConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    da: StageConfig = field(default_factory=lambda: StageConfig(epochs=15))
    di: StageConfig = field(default_factory=lambda: StageConfig(epochs=10))
    synthesis: SynthesisSpec = field(default_factory=SynthesisSpec)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    seeds: Seeds = field(default_factory=Seeds)
    d_common: int = 32
    d_specific: int = 16
    dida_iterations: int = 4
    warm_start: bool = True
    control_pool: str = "stale"
    deterministic: bool = True
    output_dir: str | None = "runs"
    run_id: str | None = None
    export_features: bool = True

    def validate(self) -> "RunConfig":
        self.da.validate()
        self.di.validate()
        if self.dida_iterations < 0:
            raise ConfigError("dida_iterations must be >= 0")
        if self.d_common < 1 or self.d_specific < 0:
            raise ConfigError("d_common must be >= 1 and d_specific >= 0")
        if self.control_pool not in ("stale", "none"):
            raise ConfigError(f"control_pool must be 'stale' or 'none', got {self.control_pool!r}")
        if self.synthesis.pairing not in ("random", "cyclic"):
            raise ConfigError(f"unknown pairing {self.synthesis.pairing!r}")
        if self.synthesis.policy not in ("replace", "append"):
            raise ConfigError(f"unknown pool policy {self.synthesis.policy!r}")
        if self.synthesis.pool_size is not None and self.synthesis.pool_size < 1:
            raise ConfigError("synthesis.pool_size must be >= 1")
        if len(self.dataset.sizes) != 3:
            raise ConfigError("dataset.sizes must list [n_source, n_target, n_test]")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


# shorthand keys accepted on the command line and in files
ALIASES = {
    "backbone": "da.backbone",
    "alpha": "da.alpha",
    "grl_lambda": "da.grl_lambda",
    "beta": "di.beta",
}


def _coerce(value, hint, key: str):
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(hint)
        if value is None and type(None) in args:
            return None
        for a in args:
            if a is type(None):
                continue
            try:
                return _coerce(value, a, key)
            except ConfigError:
                pass
        raise ConfigError(f"{key}: {value!r} does not match {hint}")
    if origin is list:
        (item,) = typing.get_args(hint)
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return [_coerce(v, item, key) for v in value]
    if hint is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{key}: expected true/false, got {value!r}")
    if hint is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        raise ConfigError(f"{key}: expected an integer, got {value!r}")
    if hint is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(f"{key}: expected a number, got {value!r}")
    if hint is str:
        if isinstance(value, str):
            return value
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    raise ConfigError(f"{key}: unsupported type {hint}")


def set_key(cfg: RunConfig, key: str, value) -> None:
    """Assign ``value`` at dotted path ``key``, type-checked against the schema."""
    key = ALIASES.get(key, key)
    *parents, leaf = key.split(".")
    obj = cfg
    for p in parents:
        if not dataclasses.is_dataclass(obj) or p not in {f.name for f in dataclasses.fields(obj)}:
            raise ConfigError(f"unknown config key {key!r}")
        obj = getattr(obj, p)
    if not dataclasses.is_dataclass(obj):
        raise ConfigError(f"unknown config key {key!r}")
    hints = typing.get_type_hints(type(obj))
    if leaf not in hints or dataclasses.is_dataclass(getattr(obj, leaf)):
        raise ConfigError(f"unknown config key {key!r}")
    setattr(obj, leaf, _coerce(value, hints[leaf], key))


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        path = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, path + "."))
        else:
            out[path] = v
    return out


def from_dict(d: dict) -> RunConfig:
    cfg = RunConfig()
    for k, v in _flatten(d or {}).items():
        set_key(cfg, k, v)
    return cfg


def load_config(path=None, overrides=()) -> RunConfig:
    """Read ``path`` (YAML/JSON) and apply ``key=value`` overrides; values parse as YAML scalars."""
    cfg = RunConfig()
    if path is not None:
        text = Path(path).read_text()
        data = yaml.safe_load(text) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        cfg = from_dict(data)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        set_key(cfg, k.strip(), yaml.safe_load(v))
    try:
        return cfg.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from e
