"""
Fine-tuning on top of a quantized base
======================================

The frozen base weights are snapped to a symmetric 8- or 4-bit grid before
federation starts. Adapters and head stay in full precision.
"""

import numpy as np
from fedlora import Strategy, from_dict
from fedlora.experiment import prepare, run_federated, train_config
from fedlora.quant import quantize_dequantize, relative_accuracy_drop

w = np.random.default_rng(0).normal(size=(4, 4))
for bits in (8, 4):
    q = quantize_dequantize(w, bits)
    print(f"{bits}-bit  max abs error {np.abs(q - w).max():.4f}  distinct values {np.unique(q).size}")

base = {"task": {"kind": "synthetic_classification", "d": 16, "n_train": 800, "n_test": 200,
                 "cluster_spread": 1.5, "shift_strength": 6.0},
        "model": {"hidden": [32], "rank": 2},
        "federation": {"num_clients": 3, "rounds": 15, "batch_size": 16, "local_epochs": 2}}

for strategy in (Strategy.FFA_LORA, Strategy.ROLORA):
    acc = {}
    for bits in (0, 8, 4):
        cfg = from_dict({**base, "quant": {"bits": bits}})
        log, _ = run_federated(prepare(cfg, 0), strategy, train_config(cfg), cfg.federation.rounds)
        acc[bits] = log.best_test_accuracy
    drop = relative_accuracy_drop(acc[0], acc[8], acc[4])
    print(f"{strategy.value:10s} fp {acc[0]:.3f}  8b {acc[8]:.3f}  4b {acc[4]:.3f}  drop {drop:+.3f}")
