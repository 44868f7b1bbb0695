"""Binary layout of client/server update messages.

All integers little-endian::

    header  magic "RLRA" | version u16 | round u32 | client_id u32 | phase u8 | entry_count u16
    entry   layer_id u16 | kind u8 (A=0, B=1, HEAD=2) | rows u32 | cols u32 | rows*cols floats, row-major

Version 1 carries float32 payloads, version 2 float16. The head entry uses
``layer_id`` equal to the number of model layers. ``phase`` is the
:class:`~fedlora.lora.FreezePhase` code (0 both, 1 freeze A, 2 freeze B).
Broadcasts from the server use the same layout with ``client_id`` 0xFFFFFFFF.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .lora import FreezePhase

MAGIC = b"RLRA"
HEADER = struct.Struct("<4sHIIBH")
ENTRY = struct.Struct("<HBII")
SERVER_ID = 0xFFFFFFFF
_VERSIONS = {32: 1, 16: 2}
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f2")}


class MatrixKind(enum.IntEnum):
    A = 0
    B = 1
    HEAD = 2


class WireError(ValueError):
    pass


@dataclass
class UpdateMessage:
    """Matrices one party transmits in a round.

    Values are kept at full precision in memory; ``precision`` only governs
    the serialized payload and therefore the byte accounting.
    """

    round: int
    client_id: int
    phase: FreezePhase
    entries: list[tuple[int, MatrixKind, np.ndarray]] = field(default_factory=list)
    precision: int = 32

    def matrix(self, layer_id: int, kind: MatrixKind) -> np.ndarray:
        for lid, k, m in self.entries:
            if lid == layer_id and k == kind:
                return m
        raise KeyError((layer_id, kind))

    def kinds(self) -> set[MatrixKind]:
        return {k for _, k, _ in self.entries}

    def to_bytes(self) -> bytes:
        return encode(self)

    @property
    def byte_size(self) -> int:
        return len(encode(self))

    def adapter_bytes(self) -> int:
        """Serialized bytes of the A/B entries alone (no header, no head)."""
        return sum(entry_size(m.shape[0], m.shape[1], self.precision)
                   for _, k, m in self.entries if k != MatrixKind.HEAD)


def entry_size(rows: int, cols: int, precision: int = 32) -> int:
    return ENTRY.size + rows * cols * (precision // 8)


def message_size(shapes: Iterable[tuple[int, int]], precision: int = 32) -> int:
    """Exact encoded length of a message carrying matrices of the given shapes."""
    if precision not in _VERSIONS:
        raise WireError(f"unsupported precision {precision}")
    return HEADER.size + sum(entry_size(r, c, precision) for r, c in shapes)


def encode(msg: UpdateMessage) -> bytes:
    if msg.precision not in _VERSIONS:
        raise WireError(f"unsupported precision {msg.precision}")
    version = _VERSIONS[msg.precision]
    dtype = _DTYPES[version]
    parts = [HEADER.pack(MAGIC, version, msg.round, msg.client_id, msg.phase.code, len(msg.entries))]
    for layer_id, kind, m in msg.entries:
        rows, cols = m.shape
        parts.append(ENTRY.pack(layer_id, int(kind), rows, cols))
        parts.append(np.ascontiguousarray(m, dtype=dtype).tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> UpdateMessage:
    """Parse a message; payloads come back as float64 arrays."""
    if len(buf) < HEADER.size:
        raise WireError("truncated header")
    magic, version, rnd, client_id, phase_code, count = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise WireError(f"bad magic {magic!r}")
    if version not in _DTYPES:
        raise WireError(f"unknown version {version}")
    dtype = _DTYPES[version]
    precision = {v: p for p, v in _VERSIONS.items()}[version]
    offset = HEADER.size
    entries = []
    for _ in range(count):
        if offset + ENTRY.size > len(buf):
            raise WireError("truncated entry header")
        layer_id, kind, rows, cols = ENTRY.unpack_from(buf, offset)
        offset += ENTRY.size
        nbytes = rows * cols * dtype.itemsize
        if offset + nbytes > len(buf):
            raise WireError("truncated payload")
        m = np.frombuffer(buf, dtype=dtype, count=rows * cols, offset=offset).astype(np.float64)
        entries.append((layer_id, MatrixKind(kind), m.reshape(rows, cols)))
        offset += nbytes
    if offset != len(buf):
        raise WireError(f"{len(buf) - offset} trailing bytes")
    return UpdateMessage(rnd, client_id, FreezePhase.from_code(phase_code), entries, precision)
