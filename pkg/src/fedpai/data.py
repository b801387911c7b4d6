"""Synthetic classification data and client partitioning.

Datasets are Gaussian class clusters with means on a sphere; partitioning
is either IID or per-class Dirichlet allocation. Both are deterministic
given their seed, and every training index lands in exactly one client
shard (largest-remainder rounding keeps realized counts within one sample
of the drawn proportions).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, LayoutError, PartitionError

_MAGIC = b"FPDS"
_MAX_PARTITION_RETRIES = 100


@dataclass
class Dataset:
    features: np.ndarray  # (num_samples, ...) float64
    labels: np.ndarray  # (num_samples,) int64 class indices
    num_classes: int
    train_indices: np.ndarray
    test_indices: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.features) != len(self.labels):
            raise LayoutError("features and labels disagree in length")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise LayoutError("labels out of range")
        if len(np.unique(self.labels)) < self.num_classes:
            raise LayoutError("every class needs at least one sample")

    @property
    def train_labels(self) -> np.ndarray:
        return self.labels[self.train_indices]


@dataclass
class PartitionPlan:
    """Disjoint per-client index lists covering all training indices."""

    client_indices: tuple[np.ndarray, ...]
    alpha: float | None  # None means IID
    seed: int

    def to_json(self) -> str:
        return json.dumps([idx.tolist() for idx in self.client_indices])


def _stratified_split(labels: np.ndarray, rng: np.random.Generator, test_fraction: float = 0.2):
    train, test = [], []
    for k in np.unique(labels):
        idx = np.flatnonzero(labels == k)
        idx = idx[rng.permutation(len(idx))]
        n_test = max(1, int(round(test_fraction * len(idx))))
        test.append(idx[:n_test])
        train.append(idx[n_test:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def make_synthetic(
    num_classes: int,
    samples_per_class: int,
    input_dim: int,
    seed: int,
    radius: float = 4.0,
    mean_dim: int | None = None,
) -> Dataset:
    """Gaussian clusters with unit covariance and class means on a sphere.

    ``mean_dim`` restricts the class means to the first ``mean_dim``
    coordinates (still on the radius-``radius`` sphere), leaving the
    remaining features as pure noise; default uses all coordinates.
    Includes a fixed 80/20 stratified train/test split.
    """
    if min(num_classes, samples_per_class, input_dim) <= 0:
        raise ConfigError(
            field="num_classes/samples_per_class/input_dim",
            value=(num_classes, samples_per_class, input_dim),
            allowed="positive",
        )
    mean_dim = input_dim if mean_dim is None else mean_dim
    if not 1 <= mean_dim <= input_dim:
        raise ConfigError(field="mean_dim", value=mean_dim, allowed=f"in [1, {input_dim}]")
    rng = np.random.default_rng(seed)
    means = np.zeros((num_classes, input_dim))
    means[:, :mean_dim] = rng.normal(size=(num_classes, mean_dim))
    means *= radius / np.linalg.norm(means, axis=1, keepdims=True)
    features = np.empty((num_classes * samples_per_class, input_dim))
    labels = np.empty(num_classes * samples_per_class, dtype=np.int64)
    for k in range(num_classes):
        sl = slice(k * samples_per_class, (k + 1) * samples_per_class)
        features[sl] = means[k] + rng.normal(size=(samples_per_class, input_dim))
        labels[sl] = k
    train_idx, test_idx = _stratified_split(labels, rng)
    return Dataset(features, labels, num_classes, train_idx, test_idx)


def _largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to ``total``, each floor(p*total) or +1."""
    raw = proportions * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        frac = raw - counts
        top = np.argsort(-frac, kind="stable")[:short]
        counts[top] += 1
    return counts


def partition_dirichlet(dataset: Dataset, num_clients: int, alpha: float, seed: int) -> PartitionPlan:
    """Allocate each class across clients with Dirichlet(alpha) proportions.

    Retries with a fresh draw (bounded) until every client holds at least
    one sample.
    """
    if alpha <= 0:
        raise ConfigError(field="alpha", value=alpha, allowed="> 0")
    if num_clients < 1:
        raise ConfigError(field="num_clients", value=num_clients, allowed=">= 1")
    labels = dataset.train_labels
    for attempt in range(_MAX_PARTITION_RETRIES):
        rng = np.random.default_rng((seed, attempt))
        shards: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
        for k in range(dataset.num_classes):
            cls = dataset.train_indices[labels == k]
            cls = cls[rng.permutation(len(cls))]
            p = rng.dirichlet(np.full(num_clients, alpha))
            counts = _largest_remainder(p, len(cls))
            stops = np.cumsum(counts)
            start = 0
            for j, stop in enumerate(stops):
                shards[j].append(cls[start:stop])
                start = int(stop)
        client_indices = tuple(np.sort(np.concatenate(s)) for s in shards)
        if all(len(c) > 0 for c in client_indices):
            return PartitionPlan(client_indices, alpha, seed)
    raise PartitionError(
        f"could not give every one of {num_clients} clients a sample after "
        f"{_MAX_PARTITION_RETRIES} draws; use a larger dataset or larger alpha"
    )


def partition_iid(dataset: Dataset, num_clients: int, seed: int) -> PartitionPlan:
    """Random equal-size shards (sizes differ by at most one)."""
    n = len(dataset.train_indices)
    if num_clients < 1 or num_clients > n:
        raise ConfigError(field="num_clients", value=num_clients, allowed=f"in [1, {n}]")
    rng = np.random.default_rng((seed, 0))
    perm = dataset.train_indices[rng.permutation(n)]
    client_indices = tuple(np.sort(part) for part in np.array_split(perm, num_clients))
    return PartitionPlan(client_indices, None, seed)


def save_dataset(dataset: Dataset, path: str) -> None:
    """Write the binary interchange format (f32 features, u16 labels)."""
    n, dim = dataset.features.shape
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<III", n, dim, dataset.num_classes))
        f.write(dataset.features.astype("<f4").tobytes())
        f.write(dataset.labels.astype("<u2").tobytes())


def load_dataset(path: str) -> Dataset:
    """Read the binary interchange format, applying the fixed 80/20 split.

    The split is stratified and deterministic (derived from the file
    contents only, not from any external seed).
    """
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _MAGIC:
        raise LayoutError(f"bad magic {blob[:4]!r}, expected {_MAGIC!r}")
    n, dim, num_classes = struct.unpack("<III", blob[4:16])
    base = 16
    fbytes = n * dim * 4
    features = np.frombuffer(blob[base : base + fbytes], dtype="<f4").reshape(n, dim)
    labels = np.frombuffer(blob[base + fbytes : base + fbytes + 2 * n], dtype="<u2")
    train_idx, test_idx = _stratified_split(
        labels.astype(np.int64), np.random.default_rng(0)
    )
    return Dataset(
        features.astype(np.float64), labels.astype(np.int64), num_classes, train_idx, test_idx
    )
