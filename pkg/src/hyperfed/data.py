"""Datasets, IDX loading and label-skewed client partitioning."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CapacityError, ConsistencyError, FormatError, ParameterError
from .numerics import Rng, dirichlet, orthonormal_rows

IID = "iid"

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MEAN_SCALE = 3.0


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ParameterError(f"features must be N x d, got {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise ParameterError("labels must have one entry per feature row")
        if len(self.labels) < 1:
            raise ParameterError("dataset is empty")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ParameterError(f"labels must lie in [0, {self.num_classes})")
        if not np.all(np.isfinite(self.features)):
            raise ParameterError("feature rows must be finite")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def missing_classes(self) -> list[int]:
        return [int(c) for c in np.flatnonzero(self.class_counts() == 0)]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)


@dataclass
class Partition:
    assignments: list[np.ndarray]
    alpha: float | str

    @property
    def num_clients(self) -> int:
        return len(self.assignments)

    def sizes(self) -> np.ndarray:
        return np.array([len(a) for a in self.assignments], dtype=np.int64)

    def check(self, n: int) -> None:
        seen = np.concatenate(self.assignments) if self.assignments else np.empty(0, np.int64)
        if len(seen) != n or not np.array_equal(np.sort(seen), np.arange(n)):
            raise ConsistencyError("partition is not a set partition of the dataset indices")
        if np.any(self.sizes() < 1):
            raise ConsistencyError("every client must hold at least one sample")


def make_synthetic(classes: int, dim: int, per_class: int, spread: float, rng: Rng) -> Dataset:
    """Gaussian blobs around mutually orthogonal class means of norm 3."""
    if classes < 2:
        raise ParameterError("need at least two classes")
    if dim < classes:
        raise CapacityError(f"dim={dim} cannot host {classes} orthogonal class means")
    if per_class < 1 or spread < 0:
        raise ParameterError("per_class must be >= 1 and spread >= 0")
    means = MEAN_SCALE * orthonormal_rows(classes, dim, rng.child(0))
    noise = rng.child(1).generator().standard_normal((classes * per_class, dim))
    labels = np.repeat(np.arange(classes), per_class)
    features = means[labels] + spread * noise
    return Dataset(features, labels, classes)


def stratified_split(ds: Dataset, fraction: float, rng: Rng) -> tuple[Dataset, Dataset]:
    """Split off ``fraction`` of every class; returns (kept, held_out).

    Classes with at least two samples keep at least one on each side.
    """
    if not 0 < fraction < 1:
        raise ParameterError("split fraction must be in (0, 1)")
    kept, held = [], []
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        if len(idx) == 0:
            continue
        idx = rng.child(c).generator().permutation(idx)
        n_held = int(round(fraction * len(idx)))
        if len(idx) >= 2:
            n_held = min(max(n_held, 1), len(idx) - 1)
        held.append(idx[:n_held])
        kept.append(idx[n_held:])
    kept_idx = np.sort(np.concatenate(kept))
    held_idx = np.sort(np.concatenate(held))
    if len(kept_idx) == 0 or len(held_idx) == 0:
        raise CapacityError(f"cannot split {len(ds)} samples with fraction {fraction}: one side would be empty")
    return ds.subset(kept_idx), ds.subset(held_idx)


def _read_header(raw: bytes, path: Path, magic: int) -> tuple[list[int], int]:
    if len(raw) < 4:
        raise FormatError(f"{path}: file too short for IDX magic", offset=len(raw))
    (found,) = struct.unpack_from(">I", raw, 0)
    if found != magic:
        raise FormatError(f"{path}: bad IDX magic 0x{found:08x}, expected 0x{magic:08x}", offset=0)
    ndim = magic & 0xFF
    end = 4 + 4 * ndim
    if len(raw) < end:
        raise FormatError(f"{path}: truncated IDX header", offset=len(raw))
    dims = list(struct.unpack_from(f">{ndim}I", raw, 4))
    return dims, end


def load_idx(images_path, labels_path, num_classes: int = 10) -> Dataset:
    """Load an MNIST-style IDX image/label pair; pixels are scaled to [0, 1]."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    raw_img = images_path.read_bytes()
    raw_lab = labels_path.read_bytes()

    dims, offset = _read_header(raw_img, images_path, IDX_IMAGES_MAGIC)
    count, rows, cols = dims
    need = offset + count * rows * cols
    if len(raw_img) != need:
        raise FormatError(
            f"{images_path}: expected {need} bytes for {count}x{rows}x{cols} images, found {len(raw_img)}",
            offset=min(len(raw_img), need),
        )
    pixels = np.frombuffer(raw_img, dtype=np.uint8, offset=offset).reshape(count, rows * cols)

    (n_labels,), loff = _read_header(raw_lab, labels_path, IDX_LABELS_MAGIC)
    if n_labels != count:
        raise FormatError(f"{labels_path}: {n_labels} labels for {count} images", offset=4)
    if len(raw_lab) != loff + n_labels:
        raise FormatError(
            f"{labels_path}: expected {loff + n_labels} bytes, found {len(raw_lab)}",
            offset=min(len(raw_lab), loff + n_labels),
        )
    labels = np.frombuffer(raw_lab, dtype=np.uint8, offset=loff).astype(np.int64)
    bad = np.flatnonzero(labels >= num_classes)
    if len(bad):
        raise FormatError(
            f"{labels_path}: label {labels[bad[0]]} outside [0, {num_classes})", offset=loff + int(bad[0])
        )
    if count < 1:
        raise FormatError(f"{images_path}: no samples", offset=offset)
    return Dataset(pixels.astype(np.float64) / 255.0, labels, num_classes)


def largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to ``total``; ties go to the lower index."""
    exact = proportions * total
    counts = np.floor(exact).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        order = np.lexsort((np.arange(len(exact)), -(exact - counts)))
        counts[order[:short]] += 1
    return counts


def partition_dirichlet(ds: Dataset, k: int, alpha: float | str, rng: Rng) -> Partition:
    """Split every class over ``k`` clients with Dirichlet(alpha) proportions.

    ``alpha=IID`` deals each class out as evenly as possible instead. Clients
    left empty take one sample from the largest client.
    """
    n = len(ds)
    if k < 1:
        raise ParameterError("need at least one client")
    if k > n:
        raise CapacityError(f"cannot give {k} clients at least one of {n} samples")
    iid = isinstance(alpha, str)
    if iid and alpha.lower() != IID:
        raise ParameterError(f"alpha must be positive or {IID!r}, got {alpha!r}")
    if not iid and not alpha > 0:
        raise ParameterError(f"alpha must be positive, got {alpha}")

    buckets: list[list[np.ndarray]] = [[] for _ in range(k)]
    offset = 0
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        if len(idx) == 0:
            continue
        idx = rng.child(c, 0).generator().permutation(idx)
        if iid:
            counts = np.full(k, len(idx) // k)
            extra = len(idx) % k
            # rotate who gets the leftovers so client totals stay balanced too
            counts[(offset + np.arange(extra)) % k] += 1
            offset = (offset + extra) % k
        else:
            counts = largest_remainder(dirichlet(float(alpha), k, rng.child(c, 1)), len(idx))
        bounds = np.concatenate([[0], np.cumsum(counts)])
        for j in range(k):
            buckets[j].append(idx[bounds[j] : bounds[j + 1]])

    assignments = [np.sort(np.concatenate(b)) if b else np.empty(0, np.int64) for b in buckets]
    for j in range(k):
        if len(assignments[j]) == 0:
            sizes = [len(a) for a in assignments]
            donor = int(np.argmax(sizes))
            assignments[j] = assignments[donor][-1:].copy()
            assignments[donor] = assignments[donor][:-1]
    part = Partition([a.astype(np.int64) for a in assignments], alpha)
    part.check(n)
    return part


def partition_stats(p: Partition, ds: Dataset) -> np.ndarray:
    """K x C matrix of per-client class counts."""
    hist = np.zeros((p.num_clients, ds.num_classes), dtype=np.int64)
    for j, idx in enumerate(p.assignments):
        idx = np.asarray(idx)
        if len(idx) and (idx.min() < 0 or idx.max() >= len(ds)):
            raise ConsistencyError(f"client {j} references an index outside [0, {len(ds)})")
        hist[j] = np.bincount(ds.labels[idx], minlength=ds.num_classes)
    return hist


def label_entropy(hist: np.ndarray) -> np.ndarray:
    """Per-client entropy (nats) of the label distribution."""
    p = hist / np.maximum(hist.sum(axis=1, keepdims=True), 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    return terms.sum(axis=1)
