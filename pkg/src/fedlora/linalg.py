"""Dense float64 matrix helpers and the deterministic random source.

Matrices are plain 2-D ``numpy.ndarray`` objects with dtype float64. The
functions here add the shape checks and finiteness guarantees the rest of the
package relies on.

The random source is numpy's Philox4x64 counter-based bit generator. Its
output stream is fully determined by the 64-bit seed and is identical on every
platform numpy supports, which is what makes experiment logs reproducible.
"""
from __future__ import annotations

import numpy as np

Matrix = np.ndarray


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Rng:
    """Seeded random stream backed by Philox (counter-based).

    Instances are single-owner; use :meth:`spawn` to derive independent
    per-client streams instead of sharing one.
    """

    def __init__(self, seed: int, *, key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        seq = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, *self.key])
        self._gen = np.random.Generator(np.random.Philox(seq))

    def spawn(self, *key: int) -> "Rng":
        """Independent child stream identified by ``key`` (stable across runs)."""
        return Rng(self.seed, key=self.key + tuple(key))

    def uniform(self, low: float, high: float, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def dirichlet(self, alpha) -> np.ndarray:
        return self._gen.dirichlet(alpha)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size)

    def random(self, size=None):
        return self._gen.random(size)


def as_matrix(data) -> Matrix:
    m = np.array(data, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def _check_finite(m: Matrix, what: str) -> Matrix:
    if not np.all(np.isfinite(m)):
        raise FloatingPointError(f"{what} produced non-finite entries")
    return m


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return _check_finite(a @ b, "matmul")


def add_scaled(acc: Matrix, m: Matrix, c: float) -> Matrix:
    """Return ``acc + c * m`` as a new matrix."""
    if acc.shape != m.shape:
        raise ShapeError(f"add_scaled shape mismatch: {acc.shape} vs {m.shape}")
    return _check_finite(acc + c * m, "add_scaled")


def frobenius_norm(m: Matrix) -> float:
    return float(np.sqrt(np.sum(np.square(m))))


def zeros(rows: int, cols: int) -> Matrix:
    if rows < 1 or cols < 1:
        raise ShapeError(f"zeros needs positive dimensions, got ({rows}, {cols})")
    return np.zeros((rows, cols), dtype=np.float64)


def kaiming_uniform_init(rows: int, cols: int, rng: Rng) -> Matrix:
    """Uniform on [-b, b] with b = sqrt(6 / cols), cols being the fan-in."""
    if rows < 1 or cols < 1:
        raise ShapeError(f"init needs positive dimensions, got ({rows}, {cols})")
    bound = np.sqrt(6.0 / cols)
    return rng.uniform(-bound, bound, size=(rows, cols))


def relative_error(actual: Matrix, expected: Matrix) -> float:
    """Frobenius distance relative to ``expected`` (absolute if expected is zero)."""
    denom = frobenius_norm(expected)
    diff = frobenius_norm(np.asarray(actual) - np.asarray(expected))
    return diff / denom if denom > 0 else diff
