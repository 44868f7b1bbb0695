"""LoRA adapter: W = W0 + alpha * B @ A, with phase-based freezing."""
from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from .linalg import Matrix, Rng, ShapeError, kaiming_uniform_init, matmul, zeros


class FreezePhase(enum.Enum):
    BOTH_TRAINABLE = "both"
    FREEZE_A = "freeze_a"
    FREEZE_B = "freeze_b"

    @property
    def trains_a(self) -> bool:
        return self is not FreezePhase.FREEZE_A

    @property
    def trains_b(self) -> bool:
        return self is not FreezePhase.FREEZE_B

    @property
    def code(self) -> int:
        return _PHASE_CODES[self]

    @classmethod
    def from_code(cls, code: int) -> "FreezePhase":
        for phase, c in _PHASE_CODES.items():
            if c == code:
                return phase
        raise ValueError(f"unknown phase code {code}")


_PHASE_CODES = {
    FreezePhase.BOTH_TRAINABLE: 0,
    FreezePhase.FREEZE_A: 1,
    FreezePhase.FREEZE_B: 2,
}


@dataclass
class LoraAdapter:
    """Low-rank update for a ``d_out x d_in`` weight.

    ``a`` is the ``rank x d_in`` down-projection and ``b`` the ``d_out x rank``
    up-projection.
    """

    a: Matrix
    b: Matrix
    alpha: float = 1.0
    phase: FreezePhase = FreezePhase.BOTH_TRAINABLE

    def __post_init__(self):
        if self.a.ndim != 2 or self.b.ndim != 2 or self.a.shape[0] != self.b.shape[1]:
            raise ShapeError(f"adapter factors do not compose: A {self.a.shape}, B {self.b.shape}")
        if self.a.shape[0] < 1:
            raise ValueError("adapter rank must be >= 1")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")

    @classmethod
    def init(cls, d_in: int, d_out: int, rank: int, rng: Rng, alpha: float = 1.0) -> "LoraAdapter":
        """Standard LoRA init: A Kaiming-uniform, B zero, so the delta starts at 0."""
        if rank < 1:
            raise ValueError("adapter rank must be >= 1")
        return cls(kaiming_uniform_init(rank, d_in, rng), zeros(d_out, rank), alpha)

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    @property
    def d_in(self) -> int:
        return self.a.shape[1]

    @property
    def d_out(self) -> int:
        return self.b.shape[0]

    def copy(self) -> "LoraAdapter":
        return replace(self, a=self.a.copy(), b=self.b.copy())


def delta(adapter: LoraAdapter) -> Matrix:
    return adapter.alpha * matmul(adapter.b, adapter.a)


def _check_input(adapter: LoraAdapter, w0: Matrix, x: Matrix) -> None:
    if w0.shape != (adapter.d_out, adapter.d_in):
        raise ShapeError(f"base weight {w0.shape} does not match adapter ({adapter.d_out}, {adapter.d_in})")
    if x.ndim != 2 or x.shape[0] != adapter.d_in:
        raise ShapeError(f"input {x.shape} does not match d_in={adapter.d_in}")


def adapter_forward(adapter: LoraAdapter, w0: Matrix, x: Matrix) -> Matrix:
    """``(W0 + alpha B A) x`` evaluated without forming the merged weight."""
    _check_input(adapter, w0, x)
    return matmul(w0, x) + adapter.alpha * matmul(adapter.b, matmul(adapter.a, x))


def adapter_grads(adapter: LoraAdapter, x: Matrix, g_out: Matrix) -> tuple[Matrix, Matrix]:
    """Gradients ``(gA, gB)`` of a loss given ``g_out = dL/d(output)``.

    gB = alpha * g_out (A x)^T and gA = alpha * B^T g_out x^T, in factored form.
    """
    if x.ndim != 2 or x.shape[0] != adapter.d_in:
        raise ShapeError(f"input {x.shape} does not match d_in={adapter.d_in}")
    if g_out.shape != (adapter.d_out, x.shape[1]):
        raise ShapeError(f"output gradient {g_out.shape} expected ({adapter.d_out}, {x.shape[1]})")
    ax = matmul(adapter.a, x)
    g_b = adapter.alpha * matmul(g_out, ax.T)
    g_a = adapter.alpha * matmul(matmul(adapter.b.T, g_out), x.T)
    return g_a, g_b


def apply_update(adapter: LoraAdapter, g_a: Matrix, g_b: Matrix, lr: float) -> LoraAdapter:
    """One SGD step on the factors the current phase allows to train.

    Frozen factors are carried over as the same array object.
    """
    if g_a.shape != adapter.a.shape or g_b.shape != adapter.b.shape:
        raise ShapeError(f"gradient shapes {g_a.shape}/{g_b.shape} do not match A {adapter.a.shape}/B {adapter.b.shape}")
    a = adapter.a - lr * g_a if adapter.phase.trains_a else adapter.a
    b = adapter.b - lr * g_b if adapter.phase.trains_b else adapter.b
    return replace(adapter, a=a, b=b)


def merge_delta(adapter: LoraAdapter, w0: Matrix) -> Matrix:
    if w0.shape != (adapter.d_out, adapter.d_in):
        raise ShapeError(f"base weight {w0.shape} does not match adapter ({adapter.d_out}, {adapter.d_in})")
    return w0 + delta(adapter)
