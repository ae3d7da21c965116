"""Datasets and non-IID partitioning across nodes."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError, IngestionError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # (num_samples, *sample_shape), float32 in [0, 1]
    labels: np.ndarray  # (num_samples,), int64
    num_classes: int

    def __post_init__(self):
        if len(self.features) != len(self.labels):
            raise DataError(f"{len(self.features)} feature rows but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple:
        return tuple(self.features.shape[1:])

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[indices], self.labels[indices], self.num_classes)

    def class_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass(frozen=True)
class DataPartition:
    owner: int
    indices: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)


@dataclass(frozen=True)
class PartitionSpec:
    alpha: float
    seed: int = 0
    min_samples_per_node: int = 1

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError(f"partition.alpha must be > 0, got {self.alpha}")
        if self.min_samples_per_node < 0:
            raise ConfigError("partition.min_samples_per_node must be >= 0")


# --------------------------------------------------------------------------
# ingestion


def _read_idx(path: Path, magic: int) -> tuple:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IngestionError(f"{path}: cannot read ({exc.strerror})") from exc
    if len(raw) < 8:
        raise IngestionError(f"{path}: truncated header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IngestionError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IngestionError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims))
    if len(raw) - header < expected:
        raise IngestionError(f"{path}: truncated payload ({len(raw) - header} of {expected} bytes)")
    data = np.frombuffer(raw, dtype=np.uint8, count=expected, offset=header)
    return dims, data.reshape(dims)


def load_idx(images_path, labels_path, num_classes: Optional[int] = None) -> Dataset:
    """Read an IDX image/label file pair (MNIST, Fashion-MNIST)."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    _, images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    _, labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise IngestionError(f"{labels_path}: {len(labels)} labels but {images_path} holds {len(images)} images")
    labels = labels.astype(np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if len(labels) else 1
    features = images.astype(np.float32) / np.float32(255.0)
    return Dataset(features, labels, num_classes)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 arrays in IDX format (used for fixtures)."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    Path(images_path).write_bytes(struct.pack(">I", IDX_IMAGES_MAGIC)
                                  + struct.pack(f">{images.ndim}I", *images.shape) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


def gen_synthetic(num_classes: int, samples_per_class: int, input_dim: int, class_separation: float,
                  seed: int) -> Dataset:
    """Unit-variance Gaussian blobs around random directions of length ``class_separation``.

    Samples are ordered class by class.  Features are min-max scaled to [0, 1]
    over the whole set, an affine map that keeps every class boundary intact.
    """
    if min(num_classes, samples_per_class, input_dim) < 1:
        raise ConfigError("num_classes, samples_per_class and input_dim must all be >= 1")
    rng = np.random.default_rng(seed)
    directions = rng.normal(size=(num_classes, input_dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    centers = class_separation * directions
    x = rng.normal(size=(num_classes, samples_per_class, input_dim)) + centers[:, None, :]
    x = x.reshape(-1, input_dim)
    lo, hi = x.min(), x.max()
    x = (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x)
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    return Dataset(x.astype(np.float32), labels.astype(np.int64), num_classes)


def stratified_split(ds: Dataset, test_per_class: int, seed: int) -> tuple:
    """Hold out ``test_per_class`` samples of every class; returns (train, test)."""
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in range(ds.num_classes):
        idx = rng.permutation(np.flatnonzero(ds.labels == c))
        test_idx.append(idx[:test_per_class])
        train_idx.append(idx[test_per_class:])
    return ds.subset(np.sort(np.concatenate(train_idx))), ds.subset(np.sort(np.concatenate(test_idx)))


def take_subset(ds: Dataset, size: Optional[int], seed: int) -> Dataset:
    """Seeded uniform subsample without replacement (identity when size is None or too large)."""
    if size is None or size >= len(ds):
        return ds
    idx = np.sort(np.random.default_rng(seed).choice(len(ds), size=size, replace=False))
    return ds.subset(idx)


# --------------------------------------------------------------------------
# partitioning


def largest_remainder(fractions: np.ndarray, total: int) -> np.ndarray:
    """Integer counts proportional to ``fractions`` that sum exactly to ``total``.

    Ties in the remainder are broken by lower index.
    """
    fractions = np.asarray(fractions, dtype=np.float64)
    fractions = fractions / fractions.sum()
    exact = fractions * total
    counts = np.floor(exact).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        order = np.lexsort((np.arange(len(exact)), -(exact - counts)))
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(ds: Dataset, n_nodes: int, spec: PartitionSpec) -> list:
    """Split every class across nodes with proportions drawn from Dir(alpha)."""
    if n_nodes < 1:
        raise ConfigError("n_nodes must be >= 1")
    if n_nodes * spec.min_samples_per_node > len(ds):
        raise ConfigError(f"{n_nodes} nodes x {spec.min_samples_per_node} minimum samples "
                          f"exceeds the {len(ds)} available")
    rng = np.random.default_rng(spec.seed)
    buckets = [[] for _ in range(n_nodes)]
    for c in range(ds.num_classes):
        members = np.flatnonzero(ds.labels == c)
        q = rng.dirichlet(np.full(n_nodes, spec.alpha))
        members = rng.permutation(members)
        if not np.all(np.isfinite(q)) or q.sum() <= 0:
            # numerically all mass collapsed; fall back to a single seeded owner
            q = np.zeros(n_nodes)
            q[rng.integers(n_nodes)] = 1.0
        counts = largest_remainder(q, len(members))
        start = 0
        for node, count in enumerate(counts):
            buckets[node].extend(members[start:start + count].tolist())
            start += count
    buckets = _repair(buckets, spec.min_samples_per_node, rng)
    return [DataPartition(i, np.array(sorted(b), dtype=np.int64)) for i, b in enumerate(buckets)]


def _repair(buckets: list, minimum: int, rng: np.random.Generator) -> list:
    """Top up small nodes with samples taken from the currently largest node."""
    for node in range(len(buckets)):
        while len(buckets[node]) < minimum:
            sizes = [len(b) for b in buckets]
            donor = int(np.argmax(sizes))
            pick = int(rng.integers(len(buckets[donor])))
            buckets[node].append(buckets[donor].pop(pick))
    return buckets


def partition_stats(parts: Sequence[DataPartition], labels: np.ndarray, num_classes: int) -> np.ndarray:
    """(n_nodes, num_classes) table of per-node class counts."""
    table = np.zeros((len(parts), num_classes), dtype=np.int64)
    for row, part in enumerate(parts):
        if len(part):
            table[row] = np.bincount(labels[part.indices], minlength=num_classes)
    return table


def label_heterogeneity(table: np.ndarray) -> float:
    """Mean over non-empty nodes of the total-variation distance to the global label mix."""
    table = np.asarray(table, dtype=np.float64)
    global_dist = table.sum(axis=0) / table.sum()
    sizes = table.sum(axis=1)
    rows = table[sizes > 0] / sizes[sizes > 0, None]
    return float(np.mean(0.5 * np.abs(rows - global_dist).sum(axis=1)))


def write_partition_csv(table: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["node", "class", "count"])
        for node, row in enumerate(table):
            for cls, count in enumerate(row):
                writer.writerow([node, cls, int(count)])
