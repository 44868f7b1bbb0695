"""Federated rounds over LoRA adapters with three aggregation strategies.

* ``FEDAVG_LORA`` trains A and B every round and averages each factor.
* ``FFA_LORA`` keeps A at its initial value and trains/averages B only.
* ``ROLORA`` alternates: odd rounds train/average B with A frozen, even
  rounds train/average A with B frozen. Because the frozen factor is
  synchronized from the server, the average of the factor equals the average
  of the products and aggregation introduces no interference.

The classifier head, when present, is trained and averaged every round under
every strategy.
"""
from __future__ import annotations

import enum
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .data import Dataset
from .linalg import Matrix, Rng, ShapeError, frobenius_norm, matmul
from .lora import FreezePhase, LoraAdapter, delta
from .metrics import RoundMetrics
from .model import AdaptedModel, LossKind, backward, evaluate, forward, loss_and_grad, sgd_step
from .wire import SERVER_ID, MatrixKind, UpdateMessage


class Strategy(enum.Enum):
    FEDAVG_LORA = "fedavg_lora"
    FFA_LORA = "ffa_lora"
    ROLORA = "rolora"


class NumericalError(FloatingPointError):
    """A loss or parameter became NaN/inf during training."""


class AggregationError(ValueError):
    pass


def phase_of_round(strategy: Strategy, t: int) -> FreezePhase:
    """Freeze phase for round ``t`` (1-based)."""
    if t < 1:
        raise ValueError(f"rounds are numbered from 1, got {t}")
    if strategy is Strategy.FEDAVG_LORA:
        return FreezePhase.BOTH_TRAINABLE
    if strategy is Strategy.FFA_LORA:
        return FreezePhase.FREEZE_A
    # B first: with B = 0 the gradient of A vanishes, so an A round would be wasted
    return FreezePhase.FREEZE_A if t % 2 == 1 else FreezePhase.FREEZE_B


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    batch_size: int = 32
    local_epochs: int = 1
    weighted: bool = False
    precision: int = 32

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError(f"lr must be non-negative, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.local_epochs < 0:
            raise ValueError("local_epochs must be >= 0")


@dataclass
class ClientState:
    id: int
    data: Dataset
    model: AdaptedModel
    rng: Rng


@dataclass
class ServerState:
    model: AdaptedModel
    strategy: Strategy
    config: TrainConfig
    loss: LossKind
    test: Optional[Dataset] = None
    round_index: int = 1
    history: list[RoundMetrics] = field(default_factory=list)
    # matrix kinds aggregated last round, i.e. what the next broadcast must carry
    pending: set[MatrixKind] = field(default_factory=lambda: {MatrixKind.A, MatrixKind.B, MatrixKind.HEAD})
    last_submissions: list[AdaptedModel] = field(default_factory=list)


def make_clients(global_model: AdaptedModel, shards: Sequence[Dataset], rng: Rng) -> list[ClientState]:
    """One client per shard, each with its own batch-order stream."""
    return [ClientState(i, shard, global_model.replica(), rng.spawn(i)) for i, shard in enumerate(shards)]


def _threads() -> int:
    try:
        return max(0, int(os.environ.get("ROLORA_THREADS", "0")))
    except ValueError:
        return 0


def _map_clients(fn: Callable[[ClientState], object], clients: Sequence[ClientState]) -> list:
    workers = _threads()
    if workers <= 1 or len(clients) <= 1:
        return [fn(c) for c in clients]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, clients))


def synchronize(client: ClientState, server: ServerState) -> None:
    """Overwrite the client's adapters and head with the server copies."""
    for layer, glayer in zip(client.model.layers, server.model.layers):
        if glayer.adapter is not None:
            layer.adapter = glayer.adapter.copy()
    if server.model.head is not None:
        client.model.head = server.model.head.copy()


def _head_id(model: AdaptedModel) -> int:
    return len(model.layers)


def _message_entries(model: AdaptedModel, kinds: set[MatrixKind]) -> list[tuple[int, MatrixKind, Matrix]]:
    entries = []
    for i in model.adapter_layers:
        adapter = model.layers[i].adapter
        if MatrixKind.A in kinds:
            entries.append((i, MatrixKind.A, adapter.a))
        if MatrixKind.B in kinds:
            entries.append((i, MatrixKind.B, adapter.b))
    if MatrixKind.HEAD in kinds and model.head is not None:
        entries.append((_head_id(model), MatrixKind.HEAD, model.head))
    return entries


def trainable_kinds(phase: FreezePhase, with_head: bool = True) -> set[MatrixKind]:
    kinds = set()
    if phase.trains_a:
        kinds.add(MatrixKind.A)
    if phase.trains_b:
        kinds.add(MatrixKind.B)
    if with_head:
        kinds.add(MatrixKind.HEAD)
    return kinds


def local_train(client: ClientState, phase: FreezePhase, config: TrainConfig, loss: LossKind,
                round_index: int = 1) -> UpdateMessage:
    """Minibatch SGD on the client's shard; returns the trainable matrices."""
    data = client.data
    if data.n == 0:
        raise ValueError(f"client {client.id} has no local data")
    model = client.model
    model.set_phase(phase)
    for _ in range(config.local_epochs):
        order = client.rng.permutation(data.n)
        for start in range(0, data.n, config.batch_size):
            idx = order[start:start + config.batch_size]
            out, cache = forward(model, data.x[:, idx])
            value, g = loss_and_grad(loss, out, data.y_at(idx))
            if not np.isfinite(value):
                raise NumericalError(f"client {client.id}: non-finite loss in round {round_index}")
            sgd_step(model, backward(model, cache, g), config.lr)
    entries = _message_entries(model, trainable_kinds(phase))
    return UpdateMessage(round_index, client.id, phase, entries, config.precision)


def _average(mats: Sequence[Matrix], weights: Sequence[float]) -> Matrix:
    # ref + sum w_i (M_i - ref): identical inputs average to themselves bitwise
    ref = mats[0]
    acc = np.zeros_like(ref)
    for w, m in zip(weights, mats):
        acc = acc + w * (m - ref)
    return ref + acc


def aggregate(server: ServerState, messages: Sequence[UpdateMessage],
              weights: Optional[Sequence[float]] = None,
              expected_ids: Optional[Sequence[int]] = None) -> ServerState:
    """Average each transmitted matrix over clients, in ascending client-id order.

    ``weights`` are aligned with ``messages`` and default to uniform ``1/N``.
    When ``expected_ids`` is given, exactly those clients must have reported.
    """
    if not messages:
        raise AggregationError("no client messages")
    ids = [m.client_id for m in messages]
    if len(set(ids)) != len(ids):
        raise AggregationError(f"duplicate client ids in {sorted(ids)}")
    if expected_ids is not None and set(ids) != set(expected_ids):
        missing = sorted(set(expected_ids) - set(ids))
        extra = sorted(set(ids) - set(expected_ids))
        raise AggregationError(f"client set mismatch: missing {missing}, unexpected {extra}")
    if weights is None:
        weights = [1.0 / len(messages)] * len(messages)
    if len(weights) != len(messages):
        raise AggregationError("one weight per message required")
    order = sorted(range(len(messages)), key=lambda k: messages[k].client_id)
    msgs = [messages[k] for k in order]
    ws = [weights[k] for k in order]
    first = msgs[0]
    for m in msgs:
        if m.round != server.round_index:
            raise AggregationError(f"client {m.client_id} sent round {m.round}, server is at {server.round_index}")
        if m.phase != first.phase:
            raise AggregationError(f"client {m.client_id} phase {m.phase} != {first.phase}")
        if [(l, k, x.shape) for l, k, x in m.entries] != [(l, k, x.shape) for l, k, x in first.entries]:
            raise AggregationError(f"client {m.client_id} payload layout differs from client {first.client_id}")

    model = server.model
    for pos, (layer_id, kind, _) in enumerate(first.entries):
        avg = _average([m.entries[pos][2] for m in msgs], ws)
        if kind is MatrixKind.HEAD:
            if model.head is None or avg.shape != model.head.shape:
                raise AggregationError("head shape mismatch")
            model.head = avg
            continue
        adapter = model.layers[layer_id].adapter
        if adapter is None:
            raise AggregationError(f"layer {layer_id} has no adapter")
        target = adapter.a if kind is MatrixKind.A else adapter.b
        if avg.shape != target.shape:
            raise AggregationError(f"layer {layer_id} {kind.name} shape {avg.shape} != {target.shape}")
        field_name = "a" if kind is MatrixKind.A else "b"
        model.layers[layer_id].adapter = replace(adapter, **{field_name: avg})
    server.pending = first.kinds()
    return server


def oracle_product_average(adapters: Sequence[LoraAdapter]) -> Matrix:
    """Interference-free reference ``(1/N) sum_i alpha B_i A_i``."""
    if not adapters:
        raise ValueError("need at least one adapter")
    total = delta(adapters[0])
    for ad in adapters[1:]:
        d = delta(ad)
        if d.shape != total.shape:
            raise ShapeError(f"adapter products differ in shape: {d.shape} vs {total.shape}")
        total = total + d
    return total / len(adapters)


def factor_average_product(adapters: Sequence[LoraAdapter]) -> Matrix:
    """What averaging the factors separately yields: ``alpha * mean(B_i) mean(A_i)``."""
    n = len(adapters)
    a_bar = sum(ad.a for ad in adapters) / n
    b_bar = sum(ad.b for ad in adapters) / n
    return adapters[0].alpha * matmul(b_bar, a_bar)


def interference_gap(adapters: Sequence[LoraAdapter]) -> float:
    return frobenius_norm(oracle_product_average(adapters) - factor_average_product(adapters))


def _model_gap(models: Sequence[AdaptedModel]) -> float:
    if len(models) < 2:
        return 0.0
    total = 0.0
    for i in models[0].adapter_layers:
        total += interference_gap([m.layers[i].adapter for m in models]) ** 2
    return float(np.sqrt(total))


def broadcast_message(server: ServerState) -> UpdateMessage:
    phase = server.model.phase
    return UpdateMessage(server.round_index, SERVER_ID, phase,
                         _message_entries(server.model, server.pending), server.config.precision)


def run_round(server: ServerState, clients: Sequence[ClientState]) -> RoundMetrics:
    """One communication round: broadcast, local training, aggregation, evaluation."""
    start = time.perf_counter()
    t = server.round_index
    downlink = broadcast_message(server).byte_size * len(clients)
    for client in clients:
        synchronize(client, server)

    phase = phase_of_round(server.strategy, t)
    cfg = server.config
    messages = _map_clients(lambda c: local_train(c, phase, cfg, server.loss, t), clients)
    uplink = sum(m.byte_size for m in messages)
    gap = _model_gap([c.model for c in clients])
    server.last_submissions = [c.model.replica() for c in clients]

    weights = None
    if cfg.weighted:
        total = sum(c.data.n for c in clients)
        weights = [c.data.n / total for c in clients]
    aggregate(server, messages, weights, expected_ids=[c.id for c in clients])
    server.model.set_phase(phase)

    sizes = np.array([c.data.n for c in clients], dtype=np.float64)
    train_losses = [evaluate(server.model, c.data, server.loss)[0] for c in clients]
    train_loss = float(np.dot(sizes, train_losses) / sizes.sum())
    if server.test is not None:
        test_loss, test_acc = evaluate(server.model, server.test, server.loss)
    else:
        test_loss, test_acc = float("nan"), float("nan")
    if not np.isfinite(train_loss):
        raise NumericalError(f"non-finite training loss after round {t}")

    metrics = RoundMetrics(t, phase, train_loss, test_loss, test_acc, uplink, downlink, gap,
                           time.perf_counter() - start)
    server.history.append(metrics)
    server.round_index += 1
    return metrics
