"""Datasets and client partitioning.

Synthetic Gaussian-blob generation for desk-scale experiments, an IDX
reader for MNIST-format files, and the two partition regimes: IID
(per-client label histograms match the global one) and label-sorted
contiguous shards (non-IID).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Raised for malformed IDX files."""


@dataclass
class LabeledDataset:
    features: np.ndarray  # (n_samples, n_features) float64
    labels: np.ndarray  # (n_samples,) int64
    n_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError("features must be a nonempty 2-D matrix")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError("labels must have one entry per sample")
        if not np.isfinite(self.features).all():
            raise ValueError("features contain non-finite values")
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise ValueError("labels outside [0, n_classes)")

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]


@dataclass
class Partition:
    """Per-client index lists into a parent dataset; disjoint, all nonempty."""

    assignments: list[np.ndarray]

    def __post_init__(self):
        self.assignments = [np.asarray(a, dtype=np.int64) for a in self.assignments]
        if not self.assignments:
            raise ValueError("partition must have at least one client")
        seen: set[int] = set()
        for i, a in enumerate(self.assignments):
            if a.size == 0:
                raise ValueError(f"client {i} received no samples")
            ids = set(a.tolist())
            if len(ids) != a.size or ids & seen:
                raise ValueError("client index lists are not disjoint")
            seen |= ids

    @property
    def client_count(self) -> int:
        return len(self.assignments)

    def sizes(self) -> np.ndarray:
        return np.array([a.size for a in self.assignments], dtype=np.int64)


def generate_blobs(
    n_classes: int, per_class: int, dim: int, spread: float, seed: int
) -> LabeledDataset:
    """Gaussian clusters with distinct class means, deterministic per seed."""
    if n_classes < 1 or per_class < 1 or dim < 1:
        raise ValueError("n_classes, per_class and dim must be positive")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(4,)))
    # Means on a scaled random frame; scaling keeps pairwise separation O(1).
    means = rng.standard_normal((n_classes, dim))
    means *= 2.0 / np.sqrt(dim)
    features = np.empty((n_classes * per_class, dim))
    labels = np.empty(n_classes * per_class, dtype=np.int64)
    for c in range(n_classes):
        block = slice(c * per_class, (c + 1) * per_class)
        features[block] = means[c] + spread * rng.standard_normal((per_class, dim))
        labels[block] = c
    order = rng.permutation(n_classes * per_class)
    return LabeledDataset(features[order], labels[order], n_classes)


def _read_be32(f, path, what) -> int:
    data = f.read(4)
    if len(data) != 4:
        raise IdxFormatError(f"{path}: truncated while reading {what}")
    return struct.unpack(">I", data)[0]


def load_idx(images_path, labels_path) -> LabeledDataset:
    """Read an IDX image/label pair; pixels scaled to [0, 1].

    Layout: 4-byte big-endian magic, dimension sizes as 4-byte big-endian
    integers, then raw unsigned bytes.
    """
    with open(images_path, "rb") as f:
        magic = _read_be32(f, images_path, "magic")
        if magic != IDX_IMAGE_MAGIC:
            raise IdxFormatError(
                f"{images_path}: bad image magic 0x{magic:08x} "
                f"(expected 0x{IDX_IMAGE_MAGIC:08x})"
            )
        n = _read_be32(f, images_path, "item count")
        rows = _read_be32(f, images_path, "row count")
        cols = _read_be32(f, images_path, "column count")
        payload = f.read(n * rows * cols)
        if len(payload) != n * rows * cols:
            raise IdxFormatError(
                f"{images_path}: truncated payload "
                f"({len(payload)} bytes, expected {n * rows * cols})"
            )
        images = np.frombuffer(payload, dtype=np.uint8).reshape(n, rows * cols)
    with open(labels_path, "rb") as f:
        magic = _read_be32(f, labels_path, "magic")
        if magic != IDX_LABEL_MAGIC:
            raise IdxFormatError(
                f"{labels_path}: bad label magic 0x{magic:08x} "
                f"(expected 0x{IDX_LABEL_MAGIC:08x})"
            )
        n_labels = _read_be32(f, labels_path, "item count")
        payload = f.read(n_labels)
        if len(payload) != n_labels:
            raise IdxFormatError(
                f"{labels_path}: truncated payload "
                f"({len(payload)} bytes, expected {n_labels})"
            )
        labels = np.frombuffer(payload, dtype=np.uint8).astype(np.int64)
    if n != n_labels:
        raise IdxFormatError(
            f"image count {n} != label count {n_labels} "
            f"({images_path} vs {labels_path})"
        )
    return LabeledDataset(
        images.astype(np.float64) / 255.0, labels, int(labels.max()) + 1
    )


def partition_iid(ds: LabeledDataset, sizes, seed: int) -> Partition:
    """Label-proportional split: each client's histogram matches the global one.

    Per-label quotas use largest-remainder rounding, so the match is exact
    whenever sizes are multiples of n_classes on a balanced dataset.
    Leftover samples are dropped, not redistributed.
    """
    sizes = np.asarray(sizes, dtype=np.int64)
    if (sizes < 1).any():
        raise ValueError("all client sizes must be positive")
    if sizes.sum() > ds.n_samples:
        raise ValueError(
            f"requested {sizes.sum()} samples but dataset has {ds.n_samples}"
        )
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(4, 1)))
    label_pools = []
    for c in range(ds.n_classes):
        pool = np.flatnonzero(ds.labels == c)
        label_pools.append(rng.permutation(pool))
    fractions = np.array([p.size for p in label_pools], dtype=np.float64)
    fractions /= ds.n_samples

    quotas = np.zeros((len(sizes), ds.n_classes), dtype=np.int64)
    for i, s in enumerate(sizes):
        exact = s * fractions
        base = np.floor(exact).astype(np.int64)
        shortfall = s - base.sum()
        # Largest remainders get the leftover units; ties to lowest label.
        order = np.lexsort((np.arange(ds.n_classes), -(exact - base)))
        base[order[:shortfall]] += 1
        quotas[i] = base
    demand = quotas.sum(axis=0)
    for c in range(ds.n_classes):
        if demand[c] > label_pools[c].size:
            raise ValueError(
                f"label {c}: requested {demand[c]} samples "
                f"but only {label_pools[c].size} available"
            )
    cursors = np.zeros(ds.n_classes, dtype=np.int64)
    assignments = []
    for i in range(len(sizes)):
        chunks = []
        for c in range(ds.n_classes):
            take = quotas[i, c]
            chunks.append(label_pools[c][cursors[c] : cursors[c] + take])
            cursors[c] += take
        assignments.append(np.concatenate(chunks))
    return Partition(assignments)


def partition_shards(
    ds: LabeledDataset,
    n_clients: int,
    n_shards: int,
    min_shards: int,
    max_shards: int,
    seed: int,
) -> Partition:
    """Label-sorted contiguous shards dealt whole to clients.

    Every client receives between min_shards and max_shards shards and the
    shard multiset is exactly partitioned; client sizes may be unbalanced.
    """
    if min_shards < 1:
        raise ValueError(f"min_shards must be >= 1, got {min_shards}")
    if max_shards < min_shards:
        raise ValueError(f"max_shards {max_shards} < min_shards {min_shards}")
    if n_shards < n_clients * min_shards:
        raise ValueError(
            f"infeasible: n_shards {n_shards} < n_clients*min_shards "
            f"{n_clients * min_shards}"
        )
    if n_shards > n_clients * max_shards:
        raise ValueError(
            f"infeasible: n_shards {n_shards} > n_clients*max_shards "
            f"{n_clients * max_shards}"
        )
    shard_size = ds.n_samples // n_shards
    if shard_size < 1:
        raise ValueError(f"infeasible: n_shards {n_shards} > n_samples {ds.n_samples}")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(4, 2)))
    by_label = np.argsort(ds.labels, kind="stable")

    counts = np.full(n_clients, min_shards, dtype=np.int64)
    for _ in range(n_shards - n_clients * min_shards):
        open_clients = np.flatnonzero(counts < max_shards)
        counts[open_clients[rng.integers(open_clients.size)]] += 1
    shard_ids = rng.permutation(n_shards)
    assignments = []
    cursor = 0
    for i in range(n_clients):
        mine = shard_ids[cursor : cursor + counts[i]]
        cursor += counts[i]
        idx = np.concatenate(
            [by_label[s * shard_size : (s + 1) * shard_size] for s in mine]
        )
        assignments.append(np.sort(idx))
    return Partition(assignments)


def split_dataset(
    ds: LabeledDataset, test_per_class: int, seed: int
) -> tuple[LabeledDataset, LabeledDataset]:
    """Hold out ``test_per_class`` seeded-random samples of every label."""
    if test_per_class < 1:
        raise ValueError("test_per_class must be positive")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(4, 3)))
    test_idx = []
    for c in range(ds.n_classes):
        pool = np.flatnonzero(ds.labels == c)
        if pool.size <= test_per_class:
            raise ValueError(
                f"label {c} has {pool.size} samples, cannot hold out {test_per_class}"
            )
        test_idx.append(rng.permutation(pool)[:test_per_class])
    test_idx = np.sort(np.concatenate(test_idx))
    mask = np.ones(ds.n_samples, dtype=bool)
    mask[test_idx] = False
    train = LabeledDataset(ds.features[mask], ds.labels[mask], ds.n_classes)
    test = LabeledDataset(ds.features[test_idx], ds.labels[test_idx], ds.n_classes)
    return train, test


def client_weights(partition: Partition) -> np.ndarray:
    """p_i = |assignment_i| / sum_j |assignment_j|."""
    sizes = partition.sizes().astype(np.float64)
    return sizes / sizes.sum()
