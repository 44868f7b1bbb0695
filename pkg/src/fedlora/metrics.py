"""Per-round metrics, communication accounting and CSV/JSON export."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence, Union

from .lora import FreezePhase
from .wire import message_size

CSV_COLUMNS = ["round", "phase", "train_loss", "test_loss", "test_accuracy",
               "uplink_bytes", "downlink_bytes", "interference_gap"]


@dataclass
class RoundMetrics:
    round: int
    phase: FreezePhase
    train_loss: float
    test_loss: float
    test_accuracy: float
    uplink_bytes: int
    downlink_bytes: int
    interference_gap: float
    wall_time: float = 0.0  # not exported: would break byte-identical logs

    def __post_init__(self):
        if self.uplink_bytes < 0 or self.downlink_bytes < 0:
            raise ValueError("byte counts must be non-negative")
        if not math.isnan(self.test_accuracy) and not 0.0 <= self.test_accuracy <= 1.0:
            raise ValueError(f"accuracy {self.test_accuracy} outside [0, 1]")


@dataclass
class MetricsLog:
    experiment_id: str
    config: dict[str, Any] = field(default_factory=dict)
    rounds: list[RoundMetrics] = field(default_factory=list)
    initial_test_loss: float = float("nan")
    initial_test_accuracy: float = float("nan")

    def append(self, m: RoundMetrics) -> None:
        if self.rounds and m.round <= self.rounds[-1].round:
            raise ValueError(f"round {m.round} does not follow {self.rounds[-1].round}")
        self.rounds.append(m)

    @property
    def best_test_accuracy(self) -> Optional[float]:
        accs = [m.test_accuracy for m in self.rounds if not math.isnan(m.test_accuracy)]
        return max(accs) if accs else None

    @property
    def total_uplink_bytes(self) -> int:
        return sum(m.uplink_bytes for m in self.rounds)

    @property
    def total_downlink_bytes(self) -> int:
        return sum(m.downlink_bytes for m in self.rounds)

    def summary(self) -> dict[str, Any]:
        return {
            "best_test_accuracy": self.best_test_accuracy,
            "final_test_accuracy": self.rounds[-1].test_accuracy if self.rounds else None,
            "initial_test_loss": self.initial_test_loss,
            "initial_test_accuracy": self.initial_test_accuracy,
            "total_uplink_bytes": self.total_uplink_bytes,
            "total_downlink_bytes": self.total_downlink_bytes,
        }


@dataclass(frozen=True)
class AdapterShape:
    d_in: int
    d_out: int
    rank: int


def message_size_bytes(adapters: Sequence[AdapterShape], phase: FreezePhase, precision: int = 32,
                       head_shape: Optional[tuple[int, int]] = None) -> int:
    """Encoded length of one client update for the given adapter layout."""
    shapes = []
    for ad in adapters:
        if ad.rank < 1:
            raise ValueError("adapter rank must be >= 1")
        if phase.trains_a:
            shapes.append((ad.rank, ad.d_in))
        if phase.trains_b:
            shapes.append((ad.d_out, ad.rank))
    if head_shape is not None:
        shapes.append(head_shape)
    return message_size(shapes, precision)


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.9g}"


def _json_float(x: Optional[float]):
    if x is None or math.isnan(x):
        return None
    return float(f"{x:.9g}")


def csv_text(log: MetricsLog) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for m in log.rounds:
        writer.writerow([m.round, m.phase.value, _fmt(m.train_loss), _fmt(m.test_loss),
                         _fmt(m.test_accuracy), m.uplink_bytes, m.downlink_bytes, _fmt(m.interference_gap)])
    return buf.getvalue()


def export_csv(log: MetricsLog, path: Union[str, Path]) -> None:
    Path(path).write_text(csv_text(log))


def _jsonable(obj):
    if isinstance(obj, float):
        return _json_float(obj)
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def json_text(log: MetricsLog) -> str:
    doc = {
        "experiment_id": log.experiment_id,
        "config": log.config,
        "rounds": [
            {
                "round": m.round,
                "phase": m.phase.value,
                "train_loss": m.train_loss,
                "test_loss": m.test_loss,
                "test_accuracy": m.test_accuracy,
                "uplink_bytes": m.uplink_bytes,
                "downlink_bytes": m.downlink_bytes,
                "interference_gap": m.interference_gap,
            }
            for m in log.rounds
        ],
        "summary": log.summary(),
    }
    return json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n"


def export_json(log: MetricsLog, path: Union[str, Path]) -> None:
    Path(path).write_text(json_text(log))


def read_csv(path: Union[str, Path]) -> list[dict[str, Any]]:
    """Parse an exported metrics CSV back into typed rows."""
    rows = []
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_COLUMNS:
            raise ValueError(f"unexpected columns {reader.fieldnames}")
        for r in reader:
            rows.append({
                "round": int(r["round"]),
                "phase": FreezePhase(r["phase"]),
                "train_loss": float(r["train_loss"]),
                "test_loss": float(r["test_loss"]),
                "test_accuracy": float(r["test_accuracy"]),
                "uplink_bytes": int(r["uplink_bytes"]),
                "downlink_bytes": int(r["downlink_bytes"]),
                "interference_gap": float(r["interference_gap"]),
            })
    return rows
