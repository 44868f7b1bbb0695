"""Fast self-checks of the core invariants, runnable without pytest."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .config import from_dict
from .experiment import prepare, run_federated, train_config
from .fedcore import Strategy, interference_gap, oracle_product_average
from .linalg import Rng, frobenius_norm, relative_error
from .lora import FreezePhase, LoraAdapter, delta
from .metrics import AdapterShape, csv_text, message_size_bytes
from .model import LossKind, backward, build_mlp, forward, loss_and_grad
from .quant import quantize_dequantize
from .wire import MatrixKind, UpdateMessage


def _central_diff(f, m, step=1e-6):
    g = np.zeros_like(m)
    for idx in np.ndindex(m.shape):
        orig = m[idx]
        m[idx] = orig + step
        up = f()
        m[idx] = orig - step
        down = f()
        m[idx] = orig
        g[idx] = (up - down) / (2 * step)
    return g


def check_interference() -> str:
    rng = Rng(101)
    for _ in range(20):
        n, d, r = int(rng.integers(2, 6)), int(rng.integers(2, 9)), int(rng.integers(1, 3))
        shared_a = rng.normal(size=(r, d))
        free = [LoraAdapter(rng.normal(size=(r, d)), rng.normal(size=(d, r))) for _ in range(n)]
        tied = [LoraAdapter(shared_a, rng.normal(size=(d, r))) for _ in range(n)]
        assert interference_gap(free) > 1e-6
        assert interference_gap(tied) <= 1e-12 * frobenius_norm(oracle_product_average(tied))
    return "20 configurations"


def check_gradients() -> str:
    worst = 0.0
    for seed in range(5):
        rng = Rng(200 + seed)
        model = build_mlp([4, 5, 3], 3, 2, rng)
        for layer in model.layers:
            layer.adapter = LoraAdapter(rng.normal(size=layer.adapter.a.shape), rng.normal(size=layer.adapter.b.shape))
        x, y = rng.normal(size=(4, 3)), rng.integers(0, 3, size=3)

        def loss():
            return loss_and_grad(LossKind.CROSS_ENTROPY, forward(model, x)[0], y)[0]

        out, cache = forward(model, x)
        grads = backward(model, cache, loss_and_grad(LossKind.CROSS_ENTROPY, out, y)[1])
        pairs = [(grads.head, model.head)]
        for i, (g_a, g_b) in grads.adapters.items():
            pairs += [(g_a, model.layers[i].adapter.a), (g_b, model.layers[i].adapter.b)]
        for g, param in pairs:
            worst = max(worst, relative_error(g, _central_diff(loss, param)))
    assert worst < 1e-5, worst
    return f"max relative error {worst:.2e}"


def check_halving() -> str:
    layout = [AdapterShape(16, 16, 2)] * 3
    rng = Rng(3)

    def real(phase):
        entries = []
        for i, ad in enumerate(layout):
            if phase.trains_a:
                entries.append((i, MatrixKind.A, rng.normal(size=(ad.rank, ad.d_in))))
            if phase.trains_b:
                entries.append((i, MatrixKind.B, rng.normal(size=(ad.d_out, ad.rank))))
        return UpdateMessage(1, 0, phase, entries)

    full = real(FreezePhase.BOTH_TRAINABLE).adapter_bytes()
    assert real(FreezePhase.FREEZE_A).adapter_bytes() * 2 == full
    assert real(FreezePhase.FREEZE_B).adapter_bytes() * 2 == full
    assert message_size_bytes(layout, FreezePhase.BOTH_TRAINABLE) == real(FreezePhase.BOTH_TRAINABLE).byte_size
    return f"{full} -> {full // 2} adapter bytes"


def _small_regression():
    return from_dict({"task": {"kind": "lowrank_regression", "d": 8, "r_true": 2, "n_train": 150, "n_test": 30},
                      "model": {"rank": 2}, "federation": {"num_clients": 3, "rounds": 6, "lr": 0.1}})


def check_exactness() -> str:
    cfg = _small_regression()
    setup = prepare(cfg, 0)
    worst = [0.0]

    def hook(server, clients, metrics):
        ad = server.model.layers[0].adapter
        oracle = oracle_product_average([m.layers[0].adapter for m in server.last_submissions])
        worst[0] = max(worst[0], relative_error(delta(ad), oracle))

    run_federated(setup, Strategy.ROLORA, train_config(cfg), 6, on_round=hook)
    assert worst[0] <= 1e-12, worst[0]
    return f"max relative deviation {worst[0]:.1e}"


def check_quantization() -> str:
    w = Rng(5).normal(size=(6, 6))
    for bits in (4, 8):
        q = quantize_dequantize(w, bits)
        assert quantize_dequantize(q, bits).tobytes() == q.tobytes()
    return "idempotent at 4 and 8 bits"


def check_determinism() -> str:
    cfg = _small_regression()
    for strategy in Strategy:
        a, _ = run_federated(prepare(cfg, 1), strategy, train_config(cfg), 4)
        b, _ = run_federated(prepare(cfg, 1), strategy, train_config(cfg), 4)
        assert csv_text(a) == csv_text(b)
    return "identical CSV for every strategy"


CHECKS: list[tuple[str, Callable[[], str]]] = [
    ("interference identity", check_interference),
    ("gradient check", check_gradients),
    ("communication halving", check_halving),
    ("alternating exactness", check_exactness),
    ("quantization idempotence", check_quantization),
    ("determinism", check_determinism),
]


def run_all(echo: Callable[[str], None] = print) -> bool:
    ok = True
    for name, fn in CHECKS:
        try:
            detail = fn()
            echo(f"PASS  {name}: {detail}")
        except AssertionError as err:
            ok = False
            echo(f"FAIL  {name}: {err}")
    return ok
