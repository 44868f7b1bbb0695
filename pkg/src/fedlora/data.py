"""Synthetic tasks, CSV ingestion and client partitioning."""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .linalg import Matrix, Rng, kaiming_uniform_init


@dataclass
class Dataset:
    """Features ``x`` (d x n) with integer labels or a ``d_out x n`` target matrix."""

    x: Matrix
    y: np.ndarray
    num_classes: Optional[int] = None

    def __post_init__(self):
        if self.x.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {self.x.shape}")
        if self.is_classification:
            if self.y.shape != (self.x.shape[1],):
                raise ValueError(f"expected {self.x.shape[1]} labels, got shape {self.y.shape}")
            if self.y.size and (self.y.min() < 0 or self.y.max() >= self.num_classes):
                raise ValueError(f"labels must lie in [0, {self.num_classes})")
        elif self.y.ndim != 2 or self.y.shape[1] != self.x.shape[1]:
            raise ValueError(f"regression targets {self.y.shape} do not match {self.x.shape[1]} samples")

    @property
    def n(self) -> int:
        return self.x.shape[1]

    @property
    def d(self) -> int:
        return self.x.shape[0]

    @property
    def is_classification(self) -> bool:
        return self.num_classes is not None

    def y_at(self, idx) -> np.ndarray:
        return self.y[idx] if self.is_classification else self.y[:, idx]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.x[:, idx], self.y_at(idx), self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.num_classes)


def concat(datasets: list[Dataset]) -> Dataset:
    first = datasets[0]
    x = np.concatenate([ds.x for ds in datasets], axis=1)
    y = np.concatenate([ds.y for ds in datasets], axis=0 if first.is_classification else 1)
    return Dataset(x, y, first.num_classes)


def class_means(d: int, num_classes: int, seed: int, scale: float = 1.0) -> Matrix:
    """Cluster centres (d x num_classes) shared by every draw with this seed."""
    return scale * Rng(seed).spawn(0).normal(0.0, 1.0, size=(d, num_classes))


def input_shift(d: int, rank: int, strength: float, seed: int) -> Matrix:
    """``I + strength * U V^T`` with ``U, V`` of ``rank`` orthonormal-ish columns."""
    if rank == 0 or strength == 0.0:
        return np.eye(d)
    rng = Rng(seed).spawn(1)
    u = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, rank))
    v = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, rank))
    return np.eye(d) + strength * (u @ v.T)


def gen_synthetic_classification(
    d: int,
    num_classes: int,
    n: int,
    cluster_spread: float,
    seed: int,
    *,
    mean_scale: float = 1.0,
    shift_rank: int = 0,
    shift_strength: float = 0.0,
    stream: int = 0,
) -> Dataset:
    """Gaussian clusters around seeded class means, optionally under a low-rank input shift.

    Class means and the shift depend only on ``seed``; the sample draws also
    depend on ``stream``, so different streams give independent samples of the
    same task. Labels are round-robin, so every class has ``n // k`` or
    ``n // k + 1`` samples.
    """
    if d < 2 or num_classes < 2:
        raise ValueError("need d >= 2 and num_classes >= 2")
    rng = Rng(seed).spawn(2, stream)
    means = class_means(d, num_classes, seed, mean_scale)
    labels = rng.permutation(np.arange(n) % num_classes)
    x = means[:, labels] + cluster_spread * rng.normal(0.0, 1.0, size=(d, n))
    x = input_shift(d, shift_rank, shift_strength, seed) @ x
    return Dataset(x, labels.astype(np.int64), num_classes)


def lowrank_base_weight(d: int, seed: int) -> Matrix:
    """The base weight used by :func:`gen_lowrank_regression` when none is given."""
    return kaiming_uniform_init(d, d, Rng(seed).spawn(3))


def gen_lowrank_regression(
    d: int,
    r_true: int,
    n: int,
    noise: float,
    seed: int,
    *,
    w0: Optional[Matrix] = None,
    stream: int = 0,
) -> tuple[Dataset, Matrix]:
    """Targets ``(W0 + dW*) x + noise`` with ``dW* = B* A*`` of rank ``r_true``.

    Returns the dataset and ``dW*``. The factors depend only on ``seed``.
    """
    if not 1 <= r_true <= d:
        raise ValueError(f"need 1 <= r_true <= d, got r_true={r_true}, d={d}")
    if w0 is None:
        w0 = lowrank_base_weight(d, seed)
    factor_rng = Rng(seed).spawn(4)
    b_star = factor_rng.normal(0.0, 1.0 / np.sqrt(r_true), size=(d, r_true))
    a_star = factor_rng.normal(0.0, 1.0 / np.sqrt(d), size=(r_true, d))
    delta_star = b_star @ a_star
    rng = Rng(seed).spawn(5, stream)
    x = rng.normal(0.0, 1.0, size=(d, n))
    y = (w0 + delta_star) @ x
    if noise:
        y = y + noise * rng.normal(0.0, 1.0, size=y.shape)
    return Dataset(x, y), delta_star


def train_test_split(dataset: Dataset, n_test: int, seed: int) -> tuple[Dataset, Dataset]:
    if not 0 < n_test < dataset.n:
        raise ValueError(f"n_test must be in (0, {dataset.n}), got {n_test}")
    order = Rng(seed).spawn(6).permutation(dataset.n)
    return dataset.subset(np.sort(order[n_test:])), dataset.subset(np.sort(order[:n_test]))


class Scheme(enum.Enum):
    IID = "iid"
    DIRICHLET = "dirichlet"
    SHARDS = "shards"


@dataclass(frozen=True)
class PartitionPlan:
    scheme: Scheme
    num_clients: int
    seed: int = 0
    beta: float = 0.5
    min_size: int = 1


def partition_indices(dataset: Dataset, plan: PartitionPlan) -> list[np.ndarray]:
    """Disjoint index sets (sorted ascending) covering ``range(dataset.n)``."""
    n, num = dataset.n, plan.num_clients
    if num < 1 or num > n:
        raise ValueError(f"cannot split {n} samples among {num} clients")
    rng = Rng(plan.seed).spawn(7)

    if plan.scheme is Scheme.IID:
        parts = np.array_split(rng.permutation(n), num)
    elif plan.scheme is Scheme.SHARDS:
        order = np.argsort(dataset.y, kind="stable") if dataset.is_classification else np.arange(n)
        parts = np.array_split(order, num)
    elif plan.scheme is Scheme.DIRICHLET:
        if not plan.beta > 0:
            raise ValueError(f"Dirichlet concentration must be positive, got {plan.beta}")
        if not dataset.is_classification:
            raise ValueError("Dirichlet label skew needs a labelled dataset")
        if num * plan.min_size > n:
            raise ValueError(f"{n} samples cannot give {num} clients at least {plan.min_size} each")
        parts = _dirichlet_split(dataset.y, dataset.num_classes, plan, rng)
    else:
        raise ValueError(f"unknown scheme {plan.scheme}")
    return [np.sort(np.asarray(p, dtype=np.int64)) for p in parts]


def _dirichlet_split(labels: np.ndarray, num_classes: int, plan: PartitionPlan, rng: Rng) -> list[np.ndarray]:
    num = plan.num_clients
    buckets: list[list[np.ndarray]] = [[] for _ in range(num)]
    for c in range(num_classes):
        idx_c = np.flatnonzero(labels == c)
        idx_c = idx_c[rng.permutation(idx_c.size)]
        props = rng.dirichlet(np.full(num, plan.beta))
        cuts = (np.cumsum(props) * idx_c.size).astype(np.int64)[:-1]
        for client, chunk in enumerate(np.split(idx_c, cuts)):
            buckets[client].append(chunk)
    parts = [list(np.concatenate(b)) for b in buckets]
    # small beta routinely leaves clients empty; top them up from the largest
    # client, taking samples of that client's majority class
    for client in range(num):
        while len(parts[client]) < plan.min_size:
            donor = max(range(num), key=lambda k: (len(parts[k]), -k))
            donor_labels = labels[parts[donor]]
            major = np.bincount(donor_labels, minlength=num_classes).argmax()
            pos = int(np.flatnonzero(donor_labels == major)[-1])
            parts[client].append(parts[donor].pop(pos))
    return [np.array(p, dtype=np.int64) for p in parts]


def partition(dataset: Dataset, plan: PartitionPlan) -> list[Dataset]:
    return [dataset.subset(idx) for idx in partition_indices(dataset, plan)]


def label_tv_distance(client: Dataset, reference: Dataset) -> float:
    """Total-variation distance between two label distributions."""
    p = client.class_counts() / client.n
    q = reference.class_counts() / reference.n
    return 0.5 * float(np.abs(p - q).sum())


class CsvFormatError(ValueError):
    pass


def load_csv(path: Union[str, Path]) -> Dataset:
    """Read ``f0,...,f{d-1},label`` rows into a classification dataset.

    The class count is ``max(label) + 1``.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise CsvFormatError(f"{path}: empty file")
        d = len(header) - 1
        expected = [f"f{i}" for i in range(d)] + ["label"]
        if d < 1 or [h.strip() for h in header] != expected:
            raise CsvFormatError(f"{path}: line 1: header must be f0,...,f{{d-1}},label, got {','.join(header)}")
        feats, labels = [], []
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != d + 1:
                raise CsvFormatError(f"{path}: line {line}: expected {d + 1} fields, got {len(row)}")
            try:
                feats.append([float(v) for v in row[:d]])
                label = int(row[d])
            except ValueError as err:
                raise CsvFormatError(f"{path}: line {line}: {err}") from None
            if label < 0:
                raise CsvFormatError(f"{path}: line {line}: negative label {label}")
            labels.append(label)
    if not labels:
        raise CsvFormatError(f"{path}: no data rows")
    x = np.array(feats, dtype=np.float64).T
    if not np.all(np.isfinite(x)):
        raise CsvFormatError(f"{path}: non-finite feature value")
    y = np.array(labels, dtype=np.int64)
    return Dataset(x, y, int(y.max()) + 1)


def save_csv(dataset: Dataset, path: Union[str, Path]) -> None:
    if not dataset.is_classification:
        raise ValueError("CSV export supports labelled datasets only")
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{i}" for i in range(dataset.d)] + ["label"])
        for j in range(dataset.n):
            writer.writerow([repr(float(v)) for v in dataset.x[:, j]] + [int(dataset.y[j])])
