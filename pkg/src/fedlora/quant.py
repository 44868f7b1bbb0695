"""Symmetric per-tensor round-to-nearest quantization of frozen base weights."""
from __future__ import annotations

import numpy as np

from .linalg import Matrix

SUPPORTED_BITS = (4, 8)


def quantize_dequantize(w0: Matrix, bits: int) -> Matrix:
    """Snap ``w0`` to the grid ``s * k``, ``s = max|w| / (2**(bits-1) - 1)``, ``|k| <= 2**(bits-1) - 1``.

    An all-zero matrix has no scale and is returned as is.
    """
    if bits not in SUPPORTED_BITS:
        raise ValueError(f"bits must be one of {SUPPORTED_BITS}, got {bits}")
    if not np.all(np.isfinite(w0)):
        raise ValueError("cannot quantize non-finite weights")
    qmax = 2 ** (bits - 1) - 1
    peak = float(np.max(np.abs(w0)))
    if peak == 0.0:
        return w0.copy()
    levels = np.clip(np.round(w0 / (peak / qmax)), -qmax, qmax)
    # peak * (k / qmax) keeps the endpoint exact and makes a second pass a no-op
    return peak * (levels / qmax)


def quantize_model_base(model, bits: int):
    """Replica of ``model`` whose base weights are quantized; adapters and head untouched."""
    from .model import AdaptedModel, Layer

    layers = []
    for layer in model.layers:
        w = quantize_dequantize(layer.w0, bits)
        w.setflags(write=False)
        layers.append(Layer(w, layer.adapter.copy() if layer.adapter else None, layer.activation))
    return AdaptedModel(layers, None if model.head is None else model.head.copy())


def relative_accuracy_drop(acc_fp: float, acc_8b: float, acc_4b: float) -> float:
    """``(acc_fp - mean(acc_8b, acc_4b)) / acc_fp``."""
    if acc_fp == 0:
        raise ZeroDivisionError("full-precision accuracy is zero")
    return (acc_fp - 0.5 * (acc_8b + acc_4b)) / acc_fp
