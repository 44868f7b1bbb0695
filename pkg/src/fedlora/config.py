"""Experiment configuration: TOML in, validated dataclasses out.

Example::

    seeds = [0, 1, 2]
    output_dir = "runs"

    [task]
    kind = "synthetic_classification"   # or "lowrank_regression", "csv"
    d = 16

    [model]
    rank = 2

    [federation]
    num_clients = 3
    rounds = 50
    strategies = ["fedavg_lora", "ffa_lora", "rolora"]
    partition = "dirichlet"
    beta = 0.1

    [quant]
    bits = 0    # 0 disables, otherwise 4 or 8

Only ``task.kind``, ``federation.num_clients`` and ``federation.rounds`` are
required; everything else has a default.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Union

import tomli
import tomli_w

TASK_KINDS = ("synthetic_classification", "lowrank_regression", "csv")
STRATEGIES = ("fedavg_lora", "ffa_lora", "rolora")
PARTITIONS = ("iid", "dirichlet", "shards")
LR_GRID = (5e-4, 1e-3, 2e-3, 5e-3, 1e-2, 2e-2, 5e-2, 1e-1, 2e-1)


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending key."""


@dataclass
class TaskConfig:
    kind: str = ""
    d: int = 16
    num_classes: int = 4
    n_train: int = 2000
    n_test: int = 500
    cluster_spread: float = 1.0
    mean_scale: float = 1.0
    shift_rank: int = 2
    shift_strength: float = 2.0
    r_true: int = 2
    noise: float = 0.0
    path: str = ""
    test_path: str = ""
    test_fraction: float = 0.2


@dataclass
class ModelConfig:
    hidden: list[int] = field(default_factory=lambda: [32])
    rank: int = 2
    alpha: float = 1.0
    adapter_layers: list[int] = field(default_factory=list)  # empty: every layer
    pretrain_epochs: int = 30
    pretrain_lr: float = 0.1


@dataclass
class FederationConfig:
    num_clients: int = 0
    rounds: int = -1
    strategies: list[str] = field(default_factory=lambda: list(STRATEGIES))
    local_epochs: int = 1
    batch_size: int = 32
    lr: float = 0.05
    partition: str = "iid"
    beta: float = 0.5
    weighted: bool = False
    precision: int = 32


@dataclass
class QuantConfig:
    bits: int = 0


@dataclass
class ExperimentConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)
    quant: QuantConfig = field(default_factory=QuantConfig)
    seeds: list[int] = field(default_factory=lambda: [0])
    output_dir: str = "runs"

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with dotted-key overrides, e.g. ``replace(**{"federation.lr": 0.1})``."""
        raw = self.to_dict()
        for key, value in changes.items():
            node = raw
            *parents, leaf = key.split(".")
            for p in parents:
                node = node[p]
            node[leaf] = value
        return from_dict(raw)


_SECTIONS = {"task": TaskConfig, "model": ModelConfig, "federation": FederationConfig, "quant": QuantConfig}


def _check_type(key: str, value: Any, hint) -> Any:
    origin = typing.get_origin(hint)
    if origin is list:
        (item,) = typing.get_args(hint)
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {type(value).__name__}")
        return [_check_type(f"{key}[{i}]", v, item) for i, v in enumerate(value)]
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    raise TypeError(f"unhandled config type {hint}")


def _build(cls, raw: dict[str, Any], prefix: str):
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for key, value in raw.items():
        full = f"{prefix}{key}"
        if key not in hints:
            raise ConfigError(f"{full}: unknown key")
        kwargs[key] = _check_type(full, value, hints[key])
    return cls(**kwargs)


def from_dict(raw: dict[str, Any]) -> ExperimentConfig:
    kwargs: dict[str, Any] = {}
    for key, value in raw.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"{key}: expected a table")
            kwargs[key] = _build(_SECTIONS[key], value, f"{key}.")
        elif key == "seeds":
            kwargs[key] = _check_type(key, value, list[int])
        elif key == "output_dir":
            kwargs[key] = _check_type(key, value, str)
        else:
            raise ConfigError(f"{key}: unknown key")
    cfg = ExperimentConfig(**kwargs)
    validate(cfg)
    return cfg


def _require(cond: bool, key: str, msg: str) -> None:
    if not cond:
        raise ConfigError(f"{key}: {msg}")


def validate(cfg: ExperimentConfig) -> None:
    t, m, f = cfg.task, cfg.model, cfg.federation
    _require(t.kind in TASK_KINDS, "task.kind", f"must be one of {TASK_KINDS}, got {t.kind!r}")
    _require(t.d >= 2, "task.d", "must be >= 2")
    _require(t.num_classes >= 2, "task.num_classes", "must be >= 2")
    _require(t.n_train >= 1, "task.n_train", "must be >= 1")
    _require(t.n_test >= 1, "task.n_test", "must be >= 1")
    _require(t.cluster_spread >= 0, "task.cluster_spread", "must be >= 0")
    _require(0 <= t.shift_rank <= t.d, "task.shift_rank", "must be in [0, d]")
    _require(1 <= t.r_true <= t.d, "task.r_true", "must be in [1, d]")
    _require(t.noise >= 0, "task.noise", "must be >= 0")
    _require(0 < t.test_fraction < 1, "task.test_fraction", "must be in (0, 1)")
    if t.kind == "csv":
        _require(bool(t.path), "task.path", "required for csv tasks")

    _require(all(h >= 1 for h in m.hidden), "model.hidden", "widths must be >= 1")
    _require(m.rank >= 1, "model.rank", "must be >= 1")
    _require(m.alpha > 0, "model.alpha", "must be > 0")
    n_layers = 1 if t.kind == "lowrank_regression" else len(m.hidden)
    _require(n_layers >= 1, "model.hidden", "need at least one hidden layer")
    _require(all(0 <= i < n_layers for i in m.adapter_layers), "model.adapter_layers",
             f"indices must lie in [0, {n_layers})")
    _require(m.pretrain_epochs >= 0, "model.pretrain_epochs", "must be >= 0")
    _require(m.pretrain_lr > 0, "model.pretrain_lr", "must be > 0")

    _require(f.num_clients >= 1, "federation.num_clients", "required, must be >= 1")
    _require(f.rounds >= 0, "federation.rounds", "required, must be >= 0")
    _require(len(f.strategies) >= 1, "federation.strategies", "must be nonempty")
    for s in f.strategies:
        _require(s in STRATEGIES, "federation.strategies", f"unknown strategy {s!r}")
    _require(f.local_epochs >= 0, "federation.local_epochs", "must be >= 0")
    _require(f.batch_size >= 1, "federation.batch_size", "must be >= 1")
    _require(f.lr > 0, "federation.lr", "must be > 0")
    _require(f.partition in PARTITIONS, "federation.partition", f"must be one of {PARTITIONS}")
    _require(f.beta > 0, "federation.beta", "must be > 0")
    _require(f.precision in (16, 32), "federation.precision", "must be 16 or 32")
    if t.kind != "csv":
        _require(f.num_clients <= t.n_train, "federation.num_clients", "exceeds task.n_train")

    _require(cfg.quant.bits in (0, 4, 8), "quant.bits", "must be 0 (off), 4 or 8")
    _require(len(cfg.seeds) >= 1, "seeds", "must be nonempty")


def parse_config(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = tomli.loads(path.read_text())
    except tomli.TOMLDecodeError as err:
        raise ConfigError(f"{path}: {err}") from None
    return from_dict(raw)
