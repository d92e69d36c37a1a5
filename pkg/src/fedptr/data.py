"""Datasets, non-i.i.d. client partitions and auxiliary-set initialization."""

from __future__ import annotations

import csv
import hashlib
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffmodels import Batch

log = logging.getLogger(__name__)

DEFAULT_BETA = 0.01


class DataError(ValueError):
    pass


def rng_for(seed: int, *keys) -> np.random.Generator:
    """Independent generator for ``(seed, *keys)``; keys may be ints or strings."""
    words = [int(seed) & 0xFFFFFFFF]
    for k in keys:
        words.append(zlib.crc32(k.encode()) if isinstance(k, str) else int(k) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(words))


@dataclass(eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise DataError("dataset needs a nonempty 2-d feature matrix")
        if self.labels.shape != (self.features.shape[0],):
            raise DataError("one label per row required")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DataError("labels must lie in [0, num_classes)")

    def __len__(self) -> int:
        return self.labels.size

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def batch(self, idx=None) -> Batch:
        if idx is None:
            return Batch(self.features, self.labels)
        return Batch(self.features[idx], self.labels[idx])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.features).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        h.update(str(self.num_classes).encode())
        return h.hexdigest()


@dataclass
class ClientPartition:
    client_indices: list[np.ndarray]
    warnings: list[str] = field(default_factory=list)

    @property
    def n_clients(self) -> int:
        return len(self.client_indices)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([idx.size for idx in self.client_indices], dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.sizes.sum())

    def label_distribution(self, data: Dataset) -> np.ndarray:
        """Row ``i`` holds client ``i``'s class counts."""
        return np.stack([np.bincount(data.labels[idx], minlength=data.num_classes)
                         for idx in self.client_indices])

    def label_entropy(self, data: Dataset) -> np.ndarray:
        """Shannon entropy (nats) of each client's label histogram; 0 for empty clients."""
        counts = self.label_distribution(data).astype(float)
        out = np.zeros(self.n_clients)
        for i, row in enumerate(counts):
            if row.sum() > 0:
                p = row[row > 0] / row.sum()
                out[i] = -np.sum(p * np.log(p))
        return out

    def validate(self, data: Dataset) -> None:
        seen = np.zeros(len(data), dtype=bool)
        for idx in self.client_indices:
            if idx.size and (idx.min() < 0 or idx.max() >= len(data)):
                raise DataError("partition index out of range")
            if seen[idx].any() or np.unique(idx).size != idx.size:
                raise DataError("partition index sets overlap")
            seen[idx] = True

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["client_id", "sample_index"])
            for cid, idx in enumerate(self.client_indices):
                for s in idx:
                    w.writerow([cid, int(s)])


def _apportion(count: int, proportions: np.ndarray) -> np.ndarray:
    """Integer split of ``count`` following ``proportions``: floors first,
    then the remainder one by one by descending fractional part (ties go to
    the lower client index)."""
    raw = proportions * count
    base = np.floor(raw).astype(np.int64)
    rest = count - int(base.sum())
    if rest > 0:
        frac = raw - base
        order = sorted(range(len(frac)), key=lambda j: (-frac[j], j))
        for j in order[:rest]:
            base[j] += 1
    return base


def dirichlet_partition(data: Dataset, n_clients: int, alpha: float, seed: int) -> ClientPartition:
    """Split each class across clients with proportions drawn from ``Dir(alpha)``.

    Clients left with no samples are kept (weight zero in aggregation) and
    listed in ``partition.warnings``.
    """
    if alpha <= 0:
        raise DataError("alpha must be positive")
    if n_clients < 1:
        raise DataError("need at least one client")
    rng = rng_for(seed, "dirichlet")
    buckets: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
    for k in range(data.num_classes):
        members = np.flatnonzero(data.labels == k)
        p = rng.dirichlet(np.full(n_clients, float(alpha)))
        # tiny alpha can underflow to an all-zero / NaN draw; fall back to one-hot
        if not np.all(np.isfinite(p)) or p.sum() <= 0:
            p = np.zeros(n_clients)
            p[rng.integers(n_clients)] = 1.0
        p = p / p.sum()
        members = members[rng.permutation(members.size)]
        counts = _apportion(members.size, p)
        start = 0
        for j, c in enumerate(counts):
            buckets[j].append(members[start:start + c])
            start += c
    indices = [np.sort(np.concatenate(b)).astype(np.int64) for b in buckets]
    part = ClientPartition(indices)
    for j, idx in enumerate(indices):
        if idx.size == 0:
            msg = f"client {j} received 0 samples (alpha={alpha}, seed={seed})"
            part.warnings.append(msg)
            log.warning(msg)
    return part


def iid_partition(data: Dataset, n_clients: int, seed: int) -> ClientPartition:
    perm = rng_for(seed, "iid").permutation(len(data))
    return ClientPartition([np.sort(c) for c in np.array_split(perm, n_clients)])


def gen_synthetic_mixture(n_per_class: int, num_classes: int, dim: int,
                          separation: float, seed: int) -> Dataset:
    """Gaussian class clusters with unit-variance noise and means of norm ``separation``."""
    if min(n_per_class, num_classes, dim) < 1:
        raise DataError("all counts must be >= 1")
    rng = rng_for(seed, "mixture")
    means = rng.normal(size=(num_classes, dim))
    means *= separation / np.linalg.norm(means, axis=1, keepdims=True)
    labels = np.repeat(np.arange(num_classes), n_per_class)
    features = means[labels] + rng.normal(size=(labels.size, dim))
    order = rng.permutation(labels.size)
    return Dataset(features[order], labels[order], num_classes)


def load_csv_dataset(path) -> Dataset:
    """Read ``label,f1,...,fd`` rows (no header)."""
    labels, rows, width = [], [], None
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split(",")
        try:
            label = int(parts[0])
            feats = [float(v) for v in parts[1:]]
        except ValueError as exc:
            raise DataError(f"{path}: malformed row on line {lineno}: {exc}") from None
        if label < 0 or not feats:
            raise DataError(f"{path}: malformed row on line {lineno}")
        if width is None:
            width = len(feats)
        elif len(feats) != width:
            raise DataError(
                f"{path}: line {lineno} has {len(feats)} features, expected {width}"
            )
        labels.append(label)
        rows.append(feats)
    if not rows:
        raise DataError(f"{path}: empty dataset")
    labels = np.array(labels, dtype=np.int64)
    return Dataset(np.array(rows), labels, int(labels.max()) + 1)


def save_csv_dataset(data: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for y, x in zip(data.labels, data.features):
            w.writerow([int(y), *(repr(float(v)) for v in x)])


@dataclass(eq=False)
class AuxiliaryDataset:
    """Learnable features with fixed labels and a learnable inner step size.

    The step size is stored as ``log_beta`` so it stays positive under
    gradient updates.
    """

    features: np.ndarray
    labels: np.ndarray
    log_beta: float
    num_classes: int

    @property
    def beta(self) -> float:
        return float(np.exp(self.log_beta))

    def __len__(self) -> int:
        return self.labels.size

    def batch(self) -> Batch:
        return Batch(self.features, self.labels)

    def replace(self, features=None, log_beta=None) -> "AuxiliaryDataset":
        return AuxiliaryDataset(
            self.features.copy() if features is None else np.asarray(features, float),
            self.labels,
            self.log_beta if log_beta is None else float(log_beta),
            self.num_classes,
        )

    def copy(self) -> "AuxiliaryDataset":
        return self.replace()


def init_auxiliary(local: Dataset | None, num_classes: int, per_class: int, dim: int,
                   mode: str, seed: int, beta: float = DEFAULT_BETA) -> AuxiliaryDataset:
    """Build an auxiliary set with ``per_class`` rows for every class.

    ``mode="client"`` copies local rows (sampled with replacement) for the
    classes the client holds and uses standard-normal noise for the rest;
    ``mode="server"`` uses noise throughout.
    """
    if per_class < 1:
        raise DataError("per_class must be >= 1")
    if mode not in ("client", "server"):
        raise DataError(f"unknown mode {mode!r}")
    if mode == "client" and local is None:
        raise DataError("client mode needs local data")
    rng = rng_for(seed, "aux-init", mode)
    labels = np.repeat(np.arange(num_classes), per_class)
    feats = np.empty((labels.size, dim))
    for k in range(num_classes):
        rows = slice(k * per_class, (k + 1) * per_class)
        members = np.flatnonzero(local.labels == k) if mode == "client" else np.empty(0, int)
        if members.size:
            feats[rows] = local.features[rng.choice(members, size=per_class, replace=True)]
        else:
            feats[rows] = rng.standard_normal((per_class, dim))
    return AuxiliaryDataset(feats, labels, float(np.log(beta)), num_classes)


def train_test_split(data: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified split; each class contributes ``round(test_fraction * n_k)`` test rows."""
    rng = rng_for(seed, "split")
    train_idx, test_idx = [], []
    for k in range(data.num_classes):
        members = np.flatnonzero(data.labels == k)
        members = members[rng.permutation(members.size)]
        n_test = int(round(test_fraction * members.size))
        test_idx.append(members[:n_test])
        train_idx.append(members[n_test:])
    return (data.subset(np.sort(np.concatenate(train_idx))),
            data.subset(np.sort(np.concatenate(test_idx))))
