"""Experiment configuration: dataclasses, YAML files and dotted overrides."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from ..encoder import ConfigError, EncoderConfig

REGULARIZER_KINDS = ("none", "lnsr", "l2sp", "mixout", "noise")
TASK_KINDS = ("pattern", "pair", "acceptability", "tsv")


@dataclass
class RegularizerSettings:
    kind: str = "none"
    sigma: float = 0.1
    inject_layer: int = 1
    layer_weights: list[float] | None = None
    backprop_below: bool = False
    alpha: float = 0.01
    beta: float = 0.01
    prob: float = 0.1
    rescale: bool = False

    def validate(self, num_layers: int) -> None:
        if self.kind not in REGULARIZER_KINDS:
            raise ConfigError(f"regularizer.kind must be one of {REGULARIZER_KINDS}, got {self.kind!r}")
        if self.sigma < 0:
            raise ConfigError("regularizer.sigma must be >= 0")
        if self.kind in ("lnsr", "noise") and not 1 <= self.inject_layer <= num_layers:
            raise ConfigError(f"regularizer.inject_layer must lie in 1..{num_layers}")
        if self.layer_weights is not None and self.kind == "lnsr":
            if len(self.layer_weights) != num_layers - self.inject_layer + 1:
                raise ConfigError("regularizer.layer_weights needs one weight per layer b..L")
            if any(w < 0 for w in self.layer_weights):
                raise ConfigError("regularizer.layer_weights must be >= 0")
        if not 0 <= self.prob <= 1:
            raise ConfigError("regularizer.prob must lie in [0, 1]")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("regularizer.alpha/beta must be >= 0")


@dataclass
class OptimizerSettings:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    bias_correction: bool = False


@dataclass
class DataSettings:
    kind: str = "pattern"
    train_size: int = 200
    eval_size: int = 200
    seq_len: int = 16
    seed: int = 7
    # tsv ingestion
    train_path: str | None = None
    eval_path: str | None = None
    schema: str = "single"  # or "pair"
    label_kind: str = "binary"  # binary | multiclass | regression
    metric: str | None = None
    header: bool = False
    subsample_ratio: float = 1.0

    def validate(self) -> None:
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"data.kind must be one of {TASK_KINDS}, got {self.kind!r}")
        if self.kind == "tsv" and not (self.train_path and self.eval_path):
            raise ConfigError("data.kind=tsv needs data.train_path and data.eval_path")
        if self.kind != "tsv" and self.train_size < 20:
            raise ConfigError("data.train_size must be >= 20")
        if not 0 < self.subsample_ratio <= 1:
            raise ConfigError("data.subsample_ratio must lie in (0, 1]")


@dataclass
class PretrainSettings:
    enabled: bool = True
    corpus_size: int = 2000
    max_steps: int = 400
    loss_threshold: float = 2.5
    batch_size: int = 32
    learning_rate: float = 1e-3
    mask_prob: float = 0.15
    seed: int = 1234
    snapshot: str | None = None


@dataclass
class ProbeSettings:
    enabled: bool = True
    scale: float = 0.05
    draws: int = 8
    max_examples: int | None = None


@dataclass
class TrainConfig:
    seed: int = 0
    learning_rate: float = 3e-4
    epochs: int = 3
    batch_size: int = 32
    warmup_fraction: float = 0.10
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    regularizer: RegularizerSettings = field(default_factory=RegularizerSettings)
    data: DataSettings = field(default_factory=DataSettings)
    pretrain: PretrainSettings = field(default_factory=PretrainSettings)
    probe: ProbeSettings = field(default_factory=ProbeSettings)

    def validate(self) -> "TrainConfig":
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if not 0 <= self.warmup_fraction < 1:
            raise ConfigError("warmup_fraction must lie in [0, 1)")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        self.regularizer.validate(self.encoder.num_layers)
        self.data.validate()
        if self.probe.scale <= 0 or self.probe.draws < 1:
            raise ConfigError("probe.scale must be > 0 and probe.draws >= 1")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def with_seed(self, seed: int) -> "TrainConfig":
        new = copy.deepcopy(self)
        new.seed = int(seed)
        return new

    def config_hash(self) -> str:
        """Hash of everything except the run seed."""
        d = self.to_dict()
        d.pop("seed")
        blob = json.dumps(d, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def _coerce(tp, value, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, Mapping):
            raise ConfigError(f"{path} must be a mapping")
        return from_dict(tp, value, path)
    if origin is typing.Union or (origin is not None and type(None) in args):
        if value is None:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, path)
    if origin is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path} must be a list")
        return [_coerce(args[0], v, f"{path}[{i}]") for i, v in enumerate(value)]
    if tp is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
            return value.lower() in ("true", "1", "yes")
        raise ConfigError(f"{path} must be a boolean, got {value!r}")
    if tp is int:
        if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
            raise ConfigError(f"{path} must be an integer, got {value!r}")
        try:
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{path} must be an integer, got {value!r}") from None
    if tp is float:
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{path} must be a number, got {value!r}") from None
    if tp is str:
        return str(value)
    return value


def from_dict(cls, data: Mapping, path: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        where = path or "config"
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")
    kwargs = {}
    for key, value in data.items():
        kwargs[key] = _coerce(hints[key], value, f"{path}.{key}" if path else key)
    return cls(**kwargs)


def _set_dotted(d: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    cur = d
    for p in parts[:-1]:
        nxt = cur.setdefault(p, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"cannot set {dotted}: {p} is not a section")
        cur = nxt
    cur[parts[-1]] = value


def build_config(base: Mapping | None = None, overrides: Mapping[str, Any] | None = None) -> TrainConfig:
    """Config from a nested mapping plus dotted-key overrides (``"regularizer.sigma": 0.2``)."""
    d = copy.deepcopy(dict(base or {}))
    for key, value in (overrides or {}).items():
        if isinstance(value, str):
            value = yaml.safe_load(value)
        _set_dotted(d, key, value)
    try:
        return from_dict(TrainConfig, d).validate()
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path | None, overrides: Mapping[str, Any] | None = None) -> TrainConfig:
    base = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            base = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(base, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    return build_config(base, overrides)


def dump_config(cfg: TrainConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


__all__ = [
    "ConfigError",
    "TrainConfig",
    "RegularizerSettings",
    "OptimizerSettings",
    "DataSettings",
    "PretrainSettings",
    "ProbeSettings",
    "build_config",
    "load_config",
    "dump_config",
    "from_dict",
]
