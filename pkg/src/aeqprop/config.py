"""Experiment configuration: TOML loading, schema validation and hashing."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
import types
import typing
from dataclasses import dataclass, field
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

from .core import AeqpropError

EXPERIMENTS = ("linreg", "linreg_grid", "hopfield_dense", "hopfield_conv", "verify")
METHODS = ("optimistic", "pessimistic", "centered", "sgd")


class ConfigError(AeqpropError, ValueError):
    """Invalid configuration; ``path`` names the offending field (e.g. ``training.beta``)."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass
class ModelSection:
    n_freq: int = 10
    regularize_state: bool = False
    target_seed: int = 0
    hidden: list[int] = field(default_factory=lambda: [2048])
    gains: list[float] | None = None


@dataclass
class TrainingSection:
    methods: list[str] = field(default_factory=lambda: ["optimistic", "pessimistic", "centered", "sgd"])
    beta: float = 0.1
    epsilon: float | dict[str, float] | None = None
    lr: float | dict[str, float] | None = None
    epochs: int = 1
    samples: int = 1000
    batch_size: int = 1
    shuffle: bool = False
    homeostatic_mode: str = "analytic"
    relaxer: str = "coordinate"
    lr_decay: float = 1.0
    adaptive_threshold: bool = False
    verify_lyapunov: bool = False
    seed: int = 0


@dataclass
class RelaxSection:
    max_iters: int = 100
    threshold: float = 1e-3
    param_schedule: str | None = None  # default: "after_state" for Hopfield experiments, else "every_sweep"
    n_steps: int = 50
    eta_s0: float = 1.0


@dataclass
class GridSection:
    epsilon: list[float] = field(default_factory=lambda: [0.5, 0.1, 0.01])
    beta: list[float] = field(default_factory=lambda: [0.5, 0.1, 0.01])
    stabilized_beta: float = 1.5
    stabilized_samples: int = 5000
    workers: int = 1


@dataclass
class DataSection:
    root: str | None = None
    train_limit: int | None = None
    test_limit: int | None = None
    verify_checksums: bool = True


@dataclass
class VerifySection:
    model: str = "linreg"
    n_instances: int = 5
    seed: int = 0


@dataclass
class OutputSection:
    dir: str = "runs"
    window: int = 50


@dataclass
class ExperimentConfig:
    experiment: str
    seed: int = 0
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    relax: RelaxSection = field(default_factory=RelaxSection)
    grid: GridSection = field(default_factory=GridSection)
    data: DataSection = field(default_factory=DataSection)
    verify: VerifySection = field(default_factory=VerifySection)
    output: OutputSection = field(default_factory=OutputSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        """Short digest of the resolved configuration (output location excluded)."""
        d = self.to_dict()
        d.pop("output")
        blob = json.dumps(d, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# Validation -------------------------------------------------------------------------------


def _check_type(value, tp, path):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        for arm in args:
            if arm is type(None):
                if value is None:
                    return None
                continue
            try:
                return _check_type(value, arm, path)
            except ConfigError:
                pass
        raise ConfigError(path, f"value {value!r} matches none of the allowed types")
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {type(value).__name__}")
        return [_check_type(v, args[0], f"{path}[{i}]") for i, v in enumerate(value)]
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(path, f"expected a table, got {type(value).__name__}")
        return {str(k): _check_type(v, args[1], f"{path}.{k}") for k, v in value.items()}
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    raise ConfigError(path, f"unsupported field type {tp}")  # pragma: no cover


def _build(cls, table: dict, path: str):
    if not isinstance(table, dict):
        raise ConfigError(path, "expected a table")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(table) - names)
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}" if path else unknown[0], "unknown field")
    kwargs = {}
    for f in dataclasses.fields(cls):
        sub = f"{path}.{f.name}" if path else f.name
        if f.name not in table:
            if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
                raise ConfigError(sub, "required field is missing")
            continue
        tp = hints[f.name]
        if dataclasses.is_dataclass(tp):
            kwargs[f.name] = _build(tp, table[f.name], sub)
        else:
            kwargs[f.name] = _check_type(table[f.name], tp, sub)
    return cls(**kwargs)


def _require(cond: bool, path: str, message: str):
    if not cond:
        raise ConfigError(path, message)


def _positive_values(value, path):
    if isinstance(value, dict):
        for k, v in value.items():
            _require(v > 0, f"{path}.{k}", "must be > 0")
    elif value is not None:
        _require(value > 0, path, "must be > 0")


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    _require(cfg.experiment in EXPERIMENTS, "experiment", f"must be one of {list(EXPERIMENTS)}")
    t = cfg.training
    _require(len(t.methods) > 0, "training.methods", "need at least one method")
    for i, m in enumerate(t.methods):
        _require(m in METHODS, f"training.methods[{i}]", f"must be one of {list(METHODS)}")
    _require(t.beta > 0, "training.beta", "must be > 0")
    _positive_values(t.epsilon, "training.epsilon")
    _positive_values(t.lr, "training.lr")
    _require(not (t.epsilon is not None and t.lr is not None), "training.lr", "give either epsilon or lr, not both")
    _require(t.epochs >= 0, "training.epochs", "must be >= 0")
    _require(t.samples >= 1, "training.samples", "must be >= 1")
    _require(t.batch_size >= 1, "training.batch_size", "must be >= 1")
    _require(t.homeostatic_mode in ("analytic", "controller"), "training.homeostatic_mode",
             "must be 'analytic' or 'controller'")
    _require(t.relaxer in ("coordinate", "gradflow"), "training.relaxer", "must be 'coordinate' or 'gradflow'")
    _require(not (t.homeostatic_mode == "controller" and t.relaxer != "gradflow"), "training.homeostatic_mode",
             "the controller mode needs relaxer = 'gradflow'")
    _require(0 < t.lr_decay <= 1, "training.lr_decay", "must lie in (0, 1]")
    _require(cfg.relax.max_iters >= 1, "relax.max_iters", "must be >= 1")
    _require(cfg.relax.threshold > 0, "relax.threshold", "must be > 0")
    _require(cfg.relax.param_schedule in (None, "every_sweep", "after_state"), "relax.param_schedule",
             "must be 'every_sweep' or 'after_state'")
    _require(cfg.relax.n_steps >= 0, "relax.n_steps", "must be >= 0")
    _require(cfg.relax.eta_s0 > 0, "relax.eta_s0", "must be > 0")
    _require(cfg.model.n_freq >= 0, "model.n_freq", "must be >= 0")
    for i, h in enumerate(cfg.model.hidden):
        _require(h >= 1, f"model.hidden[{i}]", "must be >= 1")
    for name in ("epsilon", "beta"):
        vals = getattr(cfg.grid, name)
        _require(len(vals) > 0, f"grid.{name}", "must not be empty")
        for i, v in enumerate(vals):
            _require(v > 0, f"grid.{name}[{i}]", "must be > 0")
    _require(cfg.grid.workers >= 1, "grid.workers", "must be >= 1")
    _require(cfg.verify.model in ("linreg", "linreg_stabilized", "hopfield_small"), "verify.model",
             "must be 'linreg', 'linreg_stabilized' or 'hopfield_small'")
    _require(cfg.verify.n_instances >= 1, "verify.n_instances", "must be >= 1")
    _require(cfg.output.window >= 1, "output.window", "must be >= 1")
    return cfg


def parse_config(table: dict[str, Any]) -> ExperimentConfig:
    return validate(_build(ExperimentConfig, table, ""))


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            table = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("", f"{path} is not valid TOML: {exc}") from None
    except OSError as exc:
        raise ConfigError("", f"cannot read {path}: {exc.strerror}") from None
    return parse_config(table)
