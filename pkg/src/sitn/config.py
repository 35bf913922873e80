"""Experiment configuration: dataclasses, strict YAML loading, dot-path overrides, hashing."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Optional, get_args, get_origin

import torch
import yaml

from .errors import ConfigError
from .records import SyntheticConfig

DTYPES = {"float64": torch.float64, "float32": torch.float32}


@dataclass
class ModelConfig:
    embed_dim: int = 64
    num_heads: int = 2
    max_len: int = 100
    use_positional: bool = True
    num_layers: int = 1
    layer_norm: bool = False
    residual: bool = False
    dtype: str = "float64"

    def validate(self) -> None:
        if self.embed_dim < 1 or self.num_layers < 1 or self.max_len < 1:
            raise ConfigError("embed_dim, num_layers and max_len must be positive")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(f"model width {self.embed_dim} not divisible by {self.num_heads} heads")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}, got {self.dtype!r}")

    @property
    def torch_dtype(self) -> torch.dtype:
        return DTYPES[self.dtype]


@dataclass
class SpacesConfig:
    cluster_sizes: tuple[int, ...] = (32, 64)
    top_k: int = 2
    single_space_clusters: int = 64  # cluster count when multi-granularity is ablated away

    def validate(self) -> None:
        if not self.cluster_sizes:
            raise ConfigError("cluster_sizes must list at least one interest space")
        if any(k < 1 for k in self.cluster_sizes) or self.single_space_clusters < 1:
            raise ConfigError("cluster counts must be positive")
        if self.top_k < 1:
            raise ConfigError("top_k must be >= 1")


@dataclass
class TrainConfig:
    stage1_epochs: int = 10
    stage2_epochs: int = 5
    stage1_lr: float = 1e-3
    stage2_lr: float = 1e-3
    batch_size: int = 64
    temperature: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    use_i2i: bool = True
    use_i2c: bool = True
    use_mv: bool = True
    use_mg: bool = True
    freeze_encoders: bool = False
    negatives_per_positive: int = 4
    holdout_fraction: float = 0.2
    drop_incomplete: bool = True
    stage1_max_steps: Optional[int] = None

    def validate(self) -> None:
        if self.stage1_lr <= 0 or self.stage2_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.negatives_per_positive < 0:
            raise ConfigError("negatives_per_positive must be >= 0")
        if not 0 <= self.holdout_fraction < 1:
            raise ConfigError("holdout_fraction must lie in [0, 1)")


@dataclass
class AmazonDataConfig:
    source_path: str = ""
    target_path: str = ""
    min_rating: int = 4
    min_source_len: int = 5
    max_len: int = 100

    def validate(self) -> None:
        if not self.source_path or not self.target_path:
            raise ConfigError("data.amazon.source_path and data.amazon.target_path are required")
        if not 1 <= self.min_rating <= 5:
            raise ConfigError("min_rating must lie in [1, 5]")


@dataclass
class DataConfig:
    kind: str = "synthetic"
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    amazon: AmazonDataConfig = field(default_factory=AmazonDataConfig)

    def validate(self) -> None:
        if self.kind not in ("synthetic", "amazon"):
            raise ConfigError(f"data.kind must be 'synthetic' or 'amazon', got {self.kind!r}")
        if self.kind == "synthetic":
            self.synthetic.validate()
        else:
            self.amazon.validate()


@dataclass
class AblationConfig:
    variants: tuple[str, ...] = ("no_i2c_i2i", "no_i2c", "no_i2i", "full")
    seeds: tuple[int, ...] = ()

    def validate(self) -> None:
        if not self.variants:
            raise ConfigError("ablation.variants must not be empty")


@dataclass
class ExperimentConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    spaces: SpacesConfig = field(default_factory=SpacesConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def validate(self) -> None:
        self.data.validate()
        self.model.validate()
        self.spaces.validate()
        self.train.validate()
        self.ablation.validate()
        if self.data.kind == "synthetic" and self.data.synthetic.effective_max_len() > self.model.max_len:
            raise ConfigError("model.max_len is shorter than the synthetic sequences")

    def ablation_seeds(self) -> tuple[int, ...]:
        return self.ablation.seeds if self.ablation.seeds else (self.seed,)


def _coerce(value: Any, target_type: Any, path: str) -> Any:
    origin = get_origin(target_type)
    if is_dataclass(target_type):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping")
        return _from_dict(target_type, value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        args = get_args(target_type)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value))
        if len(args) != len(value):
            raise ConfigError(f"{path}: expected {len(args)} entries, got {len(value)}")
        return tuple(_coerce(v, t, f"{path}[{i}]") for i, (v, t) in enumerate(zip(value, args)))
    if origin is not None and type(None) in get_args(target_type):  # Optional[...]
        if value is None:
            return None
        inner = [a for a in get_args(target_type) if a is not type(None)][0]
        return _coerce(value, inner, path)
    if target_type is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if target_type is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if target_type is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if target_type is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def _from_dict(dc_type, data: dict, path: str = ""):
    known = {f.name: f for f in fields(dc_type)}
    kwargs = {}
    for key, value in data.items():
        full = f"{path}.{key}" if path else key
        if key not in known:
            raise ConfigError(f"unknown config key {full!r}")
        field_type = known[key].type
        resolved = _FIELD_TYPES.get((dc_type, key))
        kwargs[key] = _coerce(value, resolved if resolved is not None else field_type, full)
    return dc_type(**kwargs)


def _resolve_field_types() -> dict:
    # dataclass field .type entries are strings under `from __future__ import annotations`
    import typing

    table = {}
    for dc in (ModelConfig, SpacesConfig, TrainConfig, AmazonDataConfig, DataConfig, AblationConfig, ExperimentConfig, SyntheticConfig):
        hints = typing.get_type_hints(dc)
        for name, hint in hints.items():
            table[(dc, name)] = hint
    return table


_FIELD_TYPES = _resolve_field_types()


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    cfg = _from_dict(ExperimentConfig, data)
    cfg.validate()
    return cfg


def config_to_dict(cfg) -> dict:
    def convert(obj):
        if is_dataclass(obj):
            return {f.name: convert(getattr(obj, f.name)) for f in fields(obj)}
        if isinstance(obj, tuple):
            return [convert(v) for v in obj]
        if isinstance(obj, list):
            return [convert(v) for v in obj]
        return obj

    return convert(cfg)


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` assignments onto a nested config dict. Values are YAML-parsed."""
    result = json.loads(json.dumps(data))  # deep copy
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key.path=value")
        dotted, raw = item.split("=", 1)
        keys = dotted.strip().split(".")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"override {item!r}: cannot parse value ({exc})")
        node = result
        for key in keys[:-1]:
            if not isinstance(node.get(key), dict):
                node[key] = {}
            node = node[key]
        node[keys[-1]] = value
    return result


def load_config(path: str | Path, overrides: Optional[list[str]] = None) -> ExperimentConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}")
    if data is None:
        data = {}
    if overrides:
        data = apply_overrides(data, overrides)
    return config_from_dict(data)


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=True))


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()
