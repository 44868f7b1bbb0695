"""End-to-end runs: build the task, pretrain the base, partition, federate."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .config import ExperimentConfig
from .data import (Dataset, PartitionPlan, Scheme, gen_lowrank_regression, gen_synthetic_classification,
                   load_csv, lowrank_base_weight, partition, train_test_split)
from .fedcore import ClientState, ServerState, Strategy, TrainConfig, make_clients, run_round
from .linalg import Rng
from .lora import LoraAdapter
from .metrics import MetricsLog, RoundMetrics, export_csv, export_json
from .model import AdaptedModel, Layer, LossKind, build_mlp, evaluate, pretrain_base
from .quant import quantize_model_base

RoundHook = Callable[[ServerState, list[ClientState], RoundMetrics], Optional[bool]]


@dataclass
class Setup:
    """Everything a federated run needs that does not depend on the strategy."""

    model: AdaptedModel
    train: Dataset
    shards: list[Dataset]
    test: Dataset
    loss: LossKind
    seed: int
    delta_star: Optional[np.ndarray] = None
    extras: dict = field(default_factory=dict)

    def with_model(self, model: AdaptedModel) -> "Setup":
        return Setup(model, self.train, self.shards, self.test, self.loss, self.seed, self.delta_star, self.extras)


def _classification_task(cfg: ExperimentConfig, seed: int):
    t = cfg.task
    common = dict(d=t.d, num_classes=t.num_classes, cluster_spread=t.cluster_spread, seed=seed,
                  mean_scale=t.mean_scale)
    source = gen_synthetic_classification(n=t.n_train, stream=0, **common)
    target = gen_synthetic_classification(n=t.n_train + t.n_test, stream=1, shift_rank=t.shift_rank,
                                          shift_strength=t.shift_strength, **common)
    train, test = train_test_split(target, t.n_test, seed)
    return source, train, test


def build_base(cfg: ExperimentConfig, seed: int, num_classes: int, source: Optional[Dataset]) -> AdaptedModel:
    m = cfg.model
    rng = Rng(seed).spawn(10)
    placement = m.adapter_layers or None
    model = build_mlp([cfg.task.d if source is None else source.d] + list(m.hidden), num_classes, m.rank, rng,
                      alpha=m.alpha, adapter_layers=placement)
    if source is not None and m.pretrain_epochs > 0:
        pretrain_base(model, source, LossKind.CROSS_ENTROPY, rng.spawn(2), epochs=m.pretrain_epochs,
                      lr=m.pretrain_lr)
    model.freeze_base()
    return model


def prepare(cfg: ExperimentConfig, seed: int) -> Setup:
    """Task data, pretrained (optionally quantized) base with fresh adapters, and client shards."""
    t = cfg.task
    delta_star = None
    if t.kind == "synthetic_classification":
        source, train, test = _classification_task(cfg, seed)
        model = build_base(cfg, seed, t.num_classes, source)
        loss = LossKind.CROSS_ENTROPY
    elif t.kind == "lowrank_regression":
        w0 = lowrank_base_weight(t.d, seed)
        w0.setflags(write=False)
        train, delta_star = gen_lowrank_regression(t.d, t.r_true, t.n_train, t.noise, seed, w0=w0, stream=0)
        test, _ = gen_lowrank_regression(t.d, t.r_true, t.n_test, t.noise, seed, w0=w0, stream=1)
        adapter = LoraAdapter.init(t.d, t.d, cfg.model.rank, Rng(seed).spawn(10, 1), cfg.model.alpha)
        model = AdaptedModel([Layer(w0, adapter, None)])
        loss = LossKind.MSE
    else:
        data = load_csv(t.path)
        if t.test_path:
            train, test = data, load_csv(t.test_path)
        else:
            train, test = train_test_split(data, max(1, int(round(t.test_fraction * data.n))), seed)
        num_classes = max(train.num_classes, test.num_classes)
        train = Dataset(train.x, train.y, num_classes)
        test = Dataset(test.x, test.y, num_classes)
        cfg_d = cfg.replace(**{"task.d": train.d})
        model = build_base(cfg_d, seed, num_classes, None)
        loss = LossKind.CROSS_ENTROPY

    if cfg.quant.bits:
        model = quantize_model_base(model, cfg.quant.bits)
    f = cfg.federation
    plan = PartitionPlan(Scheme(f.partition), f.num_clients, seed=seed, beta=f.beta)
    shards = partition(train, plan)
    return Setup(model, train, shards, test, loss, seed, delta_star)


def train_config(cfg: ExperimentConfig) -> TrainConfig:
    f = cfg.federation
    return TrainConfig(lr=f.lr, batch_size=f.batch_size, local_epochs=f.local_epochs, weighted=f.weighted,
                       precision=f.precision)


def run_federated(setup: Setup, strategy: Strategy, config: TrainConfig, rounds: int, *,
                  experiment_id: str = "", snapshot: Optional[dict] = None,
                  on_round: Optional[RoundHook] = None) -> tuple[MetricsLog, ServerState]:
    """Run ``rounds`` rounds from the setup's base model.

    ``on_round`` sees the server, clients and metrics after each round; a
    truthy return value stops the run early.
    """
    server = ServerState(setup.model.replica(), strategy, config, setup.loss, setup.test)
    clients = make_clients(server.model, setup.shards, Rng(setup.seed).spawn(12))
    log = MetricsLog(experiment_id or f"{strategy.value}_seed{setup.seed}", snapshot or {})
    log.initial_test_loss, log.initial_test_accuracy = evaluate(server.model, setup.test, setup.loss)
    for _ in range(rounds):
        metrics = run_round(server, clients)
        log.append(metrics)
        if on_round is not None and on_round(server, clients, metrics):
            break
    return log, server


def run_experiment(cfg: ExperimentConfig, strategy: Strategy, seed: int,
                   setup: Optional[Setup] = None) -> MetricsLog:
    if setup is None:
        setup = prepare(cfg, seed)
    snapshot = {**cfg.to_dict(), "strategy": strategy.value, "seed": seed}
    log, _ = run_federated(setup, strategy, train_config(cfg), cfg.federation.rounds,
                           experiment_id=f"{strategy.value}_seed{seed}", snapshot=snapshot)
    return log


def write_log(log: MetricsLog, out_dir, stem: str) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out / f"{stem}.csv", out / f"{stem}.json"
    export_csv(log, csv_path)
    export_json(log, json_path)
    return csv_path, json_path
