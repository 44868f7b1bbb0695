"""Small networks built from LoRA-adapted layers, with explicit backprop.

Columns are samples throughout: a batch input is ``d_in x n`` and the network
output is ``d_out x n``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .linalg import Matrix, Rng, ShapeError, kaiming_uniform_init, matmul
from .lora import FreezePhase, LoraAdapter, adapter_forward, adapter_grads, apply_update


class LossKind(enum.Enum):
    MSE = "mse"
    CROSS_ENTROPY = "cross_entropy"


@dataclass
class Layer:
    w0: Matrix
    adapter: Optional[LoraAdapter] = None
    activation: Optional[str] = None  # None or "tanh"

    def __post_init__(self):
        if self.activation not in (None, "tanh"):
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.adapter is not None and self.adapter.a.shape[1] != self.w0.shape[1]:
            raise ShapeError(f"adapter d_in {self.adapter.d_in} != layer input {self.w0.shape[1]}")
        if self.adapter is not None and self.adapter.b.shape[0] != self.w0.shape[0]:
            raise ShapeError(f"adapter d_out {self.adapter.d_out} != layer output {self.w0.shape[0]}")


@dataclass
class AdaptedModel:
    layers: list[Layer]
    head: Optional[Matrix] = None

    def __post_init__(self):
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.w0.shape[0] != nxt.w0.shape[1]:
                raise ShapeError(f"layer shapes do not compose: {prev.w0.shape} -> {nxt.w0.shape}")
        if self.head is not None and self.head.shape[1] != self.layers[-1].w0.shape[0]:
            raise ShapeError(f"head {self.head.shape} does not fit last layer {self.layers[-1].w0.shape}")

    @property
    def adapter_layers(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.adapter is not None]

    @property
    def phase(self) -> FreezePhase:
        phases = {self.layers[i].adapter.phase for i in self.adapter_layers}
        if len(phases) > 1:
            raise RuntimeError(f"adapters disagree on freeze phase: {phases}")
        return phases.pop() if phases else FreezePhase.BOTH_TRAINABLE

    def set_phase(self, phase: FreezePhase) -> None:
        for i in self.adapter_layers:
            self.layers[i].adapter = replace(self.layers[i].adapter, phase=phase)

    def replica(self) -> "AdaptedModel":
        """Copy with private adapters and head; base weights are shared."""
        layers = [Layer(l.w0, l.adapter.copy() if l.adapter else None, l.activation) for l in self.layers]
        return AdaptedModel(layers, None if self.head is None else self.head.copy())

    def freeze_base(self) -> None:
        for layer in self.layers:
            layer.w0.setflags(write=False)

    def trainable_parameter_count(self, phase: FreezePhase = FreezePhase.BOTH_TRAINABLE) -> int:
        count = 0
        for i in self.adapter_layers:
            adapter = self.layers[i].adapter
            count += adapter.a.size * phase.trains_a + adapter.b.size * phase.trains_b
        return count


@dataclass
class ForwardCache:
    inputs: list[Matrix]
    outputs: list[Matrix]
    features: Matrix


@dataclass
class Gradients:
    adapters: dict[int, tuple[Matrix, Matrix]] = field(default_factory=dict)
    head: Optional[Matrix] = None
    base: dict[int, Matrix] = field(default_factory=dict)


def _layer_forward(layer: Layer, h: Matrix) -> Matrix:
    if layer.adapter is not None:
        z = adapter_forward(layer.adapter, layer.w0, h)
    else:
        z = matmul(layer.w0, h)
    return np.tanh(z) if layer.activation == "tanh" else z


def forward(model: AdaptedModel, x: Matrix) -> tuple[Matrix, ForwardCache]:
    if x.ndim != 2 or x.shape[0] != model.layers[0].w0.shape[1]:
        raise ShapeError(f"input {x.shape} does not match model input dim {model.layers[0].w0.shape[1]}")
    inputs, outputs = [], []
    h = x
    for layer in model.layers:
        inputs.append(h)
        h = _layer_forward(layer, h)
        outputs.append(h)
    out = matmul(model.head, h) if model.head is not None else h
    return out, ForwardCache(inputs, outputs, h)


def predict(model: AdaptedModel, x: Matrix) -> Matrix:
    return forward(model, x)[0]


def backward(model: AdaptedModel, cache: ForwardCache, g_loss: Matrix, *, base_grads: bool = False) -> Gradients:
    """Backpropagate ``g_loss = dL/d(output)`` through head and layers.

    Base weights get gradients only when ``base_grads`` is set (pretraining).
    """
    if len(cache.inputs) != len(model.layers):
        raise ShapeError("forward cache does not belong to this model")
    for layer, inp, out in zip(model.layers, cache.inputs, cache.outputs):
        if inp.shape[0] != layer.w0.shape[1] or out.shape[0] != layer.w0.shape[0]:
            raise ShapeError("stale forward cache: layer shapes changed")
    n = cache.features.shape[1]
    out_rows = model.head.shape[0] if model.head is not None else cache.features.shape[0]
    if g_loss.shape != (out_rows, n):
        raise ShapeError(f"loss gradient {g_loss.shape} expected ({out_rows}, {n})")

    grads = Gradients()
    g = g_loss
    if model.head is not None:
        grads.head = matmul(g, cache.features.T)
        g = matmul(model.head.T, g)
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        if layer.activation == "tanh":
            g = g * (1.0 - cache.outputs[i] ** 2)
        if layer.adapter is not None:
            grads.adapters[i] = adapter_grads(layer.adapter, cache.inputs[i], g)
        if base_grads:
            grads.base[i] = matmul(g, cache.inputs[i].T)
        if i > 0:
            g_in = matmul(layer.w0.T, g)
            if layer.adapter is not None:
                ad = layer.adapter
                g_in = g_in + ad.alpha * matmul(ad.a.T, matmul(ad.b.T, g))
            g = g_in
    return grads


def loss_and_grad(kind: LossKind, output: Matrix, targets) -> tuple[float, Matrix]:
    """Batch-mean loss and its gradient with respect to ``output``.

    MSE is ``1/(2n) * sum ||o_j - y_j||^2``; cross-entropy takes integer class
    indices and treats each column of ``output`` as logits.
    """
    n = output.shape[1]
    if kind is LossKind.MSE:
        targets = np.asarray(targets, dtype=np.float64)
        if targets.shape != output.shape:
            raise ShapeError(f"targets {targets.shape} do not match output {output.shape}")
        diff = output - targets
        return float(0.5 * np.sum(diff * diff) / n), diff / n

    labels = np.asarray(targets)
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} class labels, got shape {labels.shape}")
    k = output.shape[0]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"class index out of range [0, {k})")
    shifted = output - output.max(axis=0, keepdims=True)
    log_norm = np.log(np.sum(np.exp(shifted), axis=0))
    cols = np.arange(n)
    loss = float(np.mean(log_norm - shifted[labels, cols]))
    probs = np.exp(shifted - log_norm)
    probs[labels, cols] -= 1.0
    return loss, probs / n


def evaluate(model: AdaptedModel, dataset, kind: LossKind) -> tuple[float, float]:
    """Return ``(loss, accuracy)``; accuracy is NaN for regression targets."""
    if dataset.n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    out = predict(model, dataset.x)
    loss, _ = loss_and_grad(kind, out, dataset.y)
    if kind is LossKind.CROSS_ENTROPY:
        acc = float(np.mean(np.argmax(out, axis=0) == dataset.y))
    else:
        acc = float("nan")
    return loss, acc


def sgd_step(model: AdaptedModel, grads: Gradients, lr: float, *, train_head: bool = True) -> None:
    """Update adapters (respecting their phase) and, optionally, the head in place."""
    for i, (g_a, g_b) in grads.adapters.items():
        model.layers[i].adapter = apply_update(model.layers[i].adapter, g_a, g_b, lr)
    if train_head and grads.head is not None:
        model.head = model.head - lr * grads.head


def build_mlp(
    widths: Sequence[int],
    num_classes: Optional[int],
    rank: int,
    rng: Rng,
    *,
    alpha: float = 1.0,
    adapter_layers: Optional[Sequence[int]] = None,
    activation: Optional[str] = "tanh",
) -> AdaptedModel:
    """Stack of ``len(widths) - 1`` adapted layers plus an optional linear head.

    Base weights and the head are Kaiming-uniform; they are meant to be
    overwritten by :func:`pretrain_base` before fine-tuning.
    """
    n_layers = len(widths) - 1
    if n_layers < 1:
        raise ValueError("need at least an input and an output width")
    placement = set(range(n_layers) if adapter_layers is None else adapter_layers)
    if not placement <= set(range(n_layers)):
        raise ValueError(f"adapter placement {sorted(placement)} outside layers 0..{n_layers - 1}")
    base_rng, adapter_rng = rng.spawn(0), rng.spawn(1)
    layers = []
    for i, (d_in, d_out) in enumerate(zip(widths, widths[1:])):
        w0 = kaiming_uniform_init(d_out, d_in, base_rng)
        adapter = LoraAdapter.init(d_in, d_out, rank, adapter_rng.spawn(i), alpha) if i in placement else None
        layers.append(Layer(w0, adapter, activation))
    head = kaiming_uniform_init(num_classes, widths[-1], base_rng) if num_classes else None
    return AdaptedModel(layers, head)


def pretrain_base(
    model: AdaptedModel,
    dataset,
    kind: LossKind,
    rng: Rng,
    *,
    epochs: int = 50,
    lr: float = 0.1,
    batch_size: int = 32,
) -> None:
    """Centrally train base weights and head (adapters untouched), then freeze the base."""
    for _ in range(epochs):
        order = rng.permutation(dataset.n)
        for start in range(0, dataset.n, batch_size):
            idx = order[start:start + batch_size]
            out, cache = forward(model, dataset.x[:, idx])
            _, g = loss_and_grad(kind, out, dataset.y_at(idx))
            grads = backward(model, cache, g, base_grads=True)
            for i, g_w in grads.base.items():
                model.layers[i].w0 = model.layers[i].w0 - lr * g_w
            if grads.head is not None:
                model.head = model.head - lr * grads.head
    model.freeze_base()
