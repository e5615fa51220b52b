"""Experiment configuration: nested dataclasses with a strict YAML round-trip.

Unknown keys and type mismatches are rejected with the dotted key path;
anything omitted takes the documented default.
"""
from __future__ import annotations

import copy
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .datagen import AugmentSpec, DatasetSpec
from .errors import ConfigError

LEARNER_MODES = (
    "fixmatch_daso",
    "fixmatch",
    "blend_const",
    "pseudolabel",
    "pseudolabel_daso",
    "meanteacher",
    "meanteacher_daso",
    "supervised",
)


@dataclass
class ModelConfig:
    hidden: list[int] = field(default_factory=lambda: [32])
    feature_dim: int = 16
    rho: float = 0.999

    def validate(self):
        if self.feature_dim < 1 or any(h < 1 for h in self.hidden):
            raise ConfigError("layer widths must be positive", "model.hidden")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError("rho must lie in [0, 1]", "model.rho")


@dataclass
class LossConfig:
    lambda_u: float = 1.0
    lambda_align: float = 1.0
    tau: float = 0.95
    P: int = 5000
    la_enabled: bool = False
    la_tau: float = 1.0
    learner_mode: str = "fixmatch_daso"
    # upsilon used by every class when learner_mode == "blend_const"
    blend_value: float = 0.5
    # linear ramp of lambda_u over this fraction of total_steps
    ramp_up: float | None = None
    # "blended": threshold max of the final target; "linear": max of p_hat
    mask_source: str = "blended"
    # False: only mask-passing pseudo-labels feed the tracker
    track_unmasked: bool = False

    def validate(self):
        if self.lambda_u < 0:
            raise ConfigError("must be non-negative", "loss.lambda_u")
        if self.lambda_align < 0:
            raise ConfigError("must be non-negative", "loss.lambda_align")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError("must lie in (0, 1]", "loss.tau")
        if self.P < 0:
            raise ConfigError("must be non-negative", "loss.P")
        if self.learner_mode not in LEARNER_MODES:
            raise ConfigError(f"unknown mode {self.learner_mode!r}", "loss.learner_mode")
        if not 0.0 <= self.blend_value <= 1.0:
            raise ConfigError("must lie in [0, 1]", "loss.blend_value")
        if self.ramp_up is not None and not 0.0 < self.ramp_up <= 1.0:
            raise ConfigError("must lie in (0, 1]", "loss.ramp_up")
        if self.mask_source not in ("blended", "linear"):
            raise ConfigError(f"unknown mask source {self.mask_source!r}", "loss.mask_source")


@dataclass
class BankConfig:
    L: int = 256
    T_proto: float = 0.05
    balanced: bool = True
    use_ema_encoder: bool = True

    def validate(self):
        if self.L < 1:
            raise ConfigError("must be positive", "bank.L")
        if self.T_proto <= 0:
            raise ConfigError("must be positive", "bank.T_proto")


@dataclass
class TrackerConfig:
    segment_len: int = 100
    T_dist: float = 1.5
    mode: str = "segment"

    def validate(self):
        if self.segment_len < 1:
            raise ConfigError("must be positive", "tracker.segment_len")
        if self.T_dist <= 0:
            raise ConfigError("must be positive", "tracker.T_dist")
        if self.mode not in ("segment", "window"):
            raise ConfigError(f"unknown mode {self.mode!r}", "tracker.mode")


@dataclass
class OptimConfig:
    lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 5e-4
    nesterov: bool = True
    batch_size: int = 64
    mu: int = 2

    def validate(self):
        if self.lr <= 0:
            raise ConfigError("must be positive", "optim.lr")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("must lie in [0, 1)", "optim.momentum")
        if self.weight_decay < 0:
            raise ConfigError("must be non-negative", "optim.weight_decay")
        if self.batch_size < 1:
            raise ConfigError("must be positive", "optim.batch_size")
        if self.mu < 1:
            raise ConfigError("must be positive", "optim.mu")


@dataclass
class RunSection:
    name: str = "run"
    total_steps: int = 10000
    eval_interval: int = 500
    median_k: int = 20
    seed: int = 0
    out_dir: str | None = None

    def validate(self):
        if self.total_steps < 0:
            raise ConfigError("must be non-negative", "run.total_steps")
        if self.eval_interval < 1:
            raise ConfigError("must be positive", "run.eval_interval")
        if self.total_steps % self.eval_interval:
            raise ConfigError("eval_interval must divide total_steps", "run.eval_interval")
        if self.median_k < 1:
            raise ConfigError("must be positive", "run.median_k")


@dataclass
class RunConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    bank: BankConfig = field(default_factory=BankConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    run: RunSection = field(default_factory=RunSection)

    @property
    def layer_dims(self) -> list[int]:
        return [self.dataset.d, *self.model.hidden, self.model.feature_dim]

    def validate(self) -> "RunConfig":
        for f in dataclasses.fields(self):
            getattr(self, f.name).validate()
        return self


# --- strict conversion ----------------------------------------------------


def _coerce(value, tp, key):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], key)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"expected a list, got {type(value).__name__}", key)
        return [_coerce(v, args[0], f"{key}[{i}]") for i, v in enumerate(value)]
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"expected a boolean, got {value!r}", key)
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", key)
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", key)
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", key)
        return value
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, key)
    raise ConfigError(f"unsupported field type {tp}", key)


def _build(cls, data, prefix=""):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("expected a mapping", prefix or "<root>")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for k in data:
        if k not in names:
            raise ConfigError("unknown key", f"{prefix}.{k}" if prefix else str(k))
    kwargs = {}
    for name in names:
        if name in data:
            key = f"{prefix}.{name}" if prefix else name
            kwargs[name] = _coerce(data[name], hints[name], key)
    return cls(**kwargs)


def config_from_dict(data) -> RunConfig:
    return _build(RunConfig, data).validate()


def parse_config(source=None) -> RunConfig:
    """Parse a YAML path, YAML text, or mapping into a validated RunConfig."""
    if source is None:
        data = {}
    elif isinstance(source, dict):
        data = source
    elif isinstance(source, Path) or (isinstance(source, str) and "\n" not in source and Path(source).is_file()):
        data = yaml.safe_load(Path(source).read_text())
    else:
        data = yaml.safe_load(source)
    return config_from_dict(data or {})


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def serialize_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)


def with_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Copy of ``cfg`` with dotted-key overrides applied and re-validated."""
    data = copy.deepcopy(config_to_dict(cfg))
    for dotted, value in overrides.items():
        node = data
        parts = dotted.split(".")
        for p in parts[:-1]:
            if not isinstance(node, dict) or p not in node:
                raise ConfigError("unknown key", dotted)
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError("unknown key", dotted)
        node[parts[-1]] = value
    return config_from_dict(data)
