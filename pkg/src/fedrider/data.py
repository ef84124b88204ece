"""Labeled datasets and client partitioning.

Two sources: IDX binary files (the classic big-endian image/label layout)
and a synthetic Gaussian-blob generator sized for fast desk-scale runs.
Partitioning is either IID (seeded random split) or sorted non-IID, where
label-sorted contiguous shards give every client at most two classes once
there are at least as many clients as classes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "DataError",
    "BadMagicError",
    "TruncatedPayloadError",
    "CountMismatchError",
    "TooManyClientsError",
    "Dataset",
    "Partition",
    "load_idx",
    "synth_dataset",
    "partition_iid",
    "partition_sorted",
]

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049

# constant stream for per-class centers, independent of the sample seed so
# every seed shares the same class geometry
_CENTER_STREAM = 0x0C3A7E55


class DataError(Exception):
    """Base class for dataset loading and partitioning failures."""


class BadMagicError(DataError):
    pass


class TruncatedPayloadError(DataError):
    pass


class CountMismatchError(DataError):
    pass


class TooManyClientsError(DataError):
    pass


@dataclass(frozen=True)
class Dataset:
    """Feature matrix in [0,1] with integer labels in [0, num_classes)."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        f, y = self.features, self.labels
        if f.ndim != 2 or y.ndim != 1 or f.shape[0] != y.shape[0]:
            raise DataError(f"features {f.shape} and labels {y.shape} do not align")
        if y.dtype.kind not in "iu":
            raise DataError("labels must be integers")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise DataError("label outside [0, num_classes)")
        if f.size and (f.min() < 0.0 or f.max() > 1.0):
            raise DataError("features must lie in [0, 1]")

    @property
    def num_samples(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def take(self, indices: np.ndarray) -> "Dataset":
        """Sub-dataset at the given sample indices (a client shard)."""
        idx = np.asarray(indices)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)


@dataclass(frozen=True)
class Partition:
    """Disjoint per-client index shards that exactly cover the dataset."""

    shards: tuple

    def __post_init__(self):
        if any(len(s) == 0 for s in self.shards):
            raise DataError("empty shard")

    @property
    def n_clients(self) -> int:
        return len(self.shards)

    def validate_cover(self, num_samples: int) -> None:
        merged = np.concatenate([np.asarray(s) for s in self.shards]) if self.shards else np.array([], dtype=np.int64)
        if merged.size != num_samples or not np.array_equal(np.sort(merged), np.arange(num_samples)):
            raise DataError("shards are not an exact cover of the dataset")


def _read_header(raw: bytes, expected_magic: int, ndim: int, path) -> tuple[tuple[int, ...], int]:
    header_len = 4 + 4 * ndim
    if len(raw) < 4:
        raise TruncatedPayloadError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise BadMagicError(f"{path}: magic {magic}, expected {expected_magic}")
    if len(raw) < header_len:
        raise TruncatedPayloadError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    return dims, header_len


def load_idx(images_path, labels_path) -> Dataset:
    """Load an IDX image/label file pair into a Dataset.

    Image files carry magic 2051 and three big-endian dims (count, rows,
    cols); label files carry magic 2049 and one dim. Pixel bytes scale
    linearly so 0 -> 0.0 and 255 -> 1.0.
    """
    images_path, labels_path = Path(images_path), Path(labels_path)
    img_raw = images_path.read_bytes()
    lbl_raw = labels_path.read_bytes()

    (n_img, rows, cols), img_off = _read_header(img_raw, IMAGE_MAGIC, 3, images_path)
    payload = n_img * rows * cols
    if len(img_raw) < img_off + payload:
        raise TruncatedPayloadError(f"{images_path}: payload shorter than declared shape")
    if len(img_raw) > img_off + payload:
        raise DataError(f"{images_path}: trailing bytes after payload")

    (n_lbl,), lbl_off = _read_header(lbl_raw, LABEL_MAGIC, 1, labels_path)
    if len(lbl_raw) < lbl_off + n_lbl:
        raise TruncatedPayloadError(f"{labels_path}: payload shorter than declared count")
    if len(lbl_raw) > lbl_off + n_lbl:
        raise DataError(f"{labels_path}: trailing bytes after payload")

    if n_img != n_lbl:
        raise CountMismatchError(f"{n_img} images vs {n_lbl} labels")

    pixels = np.frombuffer(img_raw, dtype=np.uint8, count=payload, offset=img_off)
    features = pixels.reshape(n_img, rows * cols).astype(np.float64) / 255.0
    labels = np.frombuffer(lbl_raw, dtype=np.uint8, count=n_lbl, offset=lbl_off).astype(np.int64)
    num_classes = int(labels.max()) + 1 if labels.size else 0
    return Dataset(features, labels, num_classes)


def synth_dataset(num_classes: int = 10, per_class: int = 100, feature_dim: int = 20,
                  spread: float = 0.12, seed: int = 0) -> Dataset:
    """Isotropic Gaussian blobs around fixed per-class centers, clamped to [0,1].

    Centers depend only on (num_classes, feature_dim), never on `seed`, so
    different seeds draw different samples from the same class geometry.
    """
    if num_classes < 1 or per_class < 1 or feature_dim < 1:
        raise DataError("num_classes, per_class and feature_dim must be positive")
    if spread < 0:
        raise DataError("spread must be non-negative")
    center_rng = np.random.default_rng([_CENTER_STREAM, num_classes, feature_dim])
    centers = center_rng.uniform(0.15, 0.85, size=(num_classes, feature_dim))
    rng = np.random.default_rng([seed, num_classes, per_class, feature_dim])
    noise = rng.standard_normal((num_classes, per_class, feature_dim))
    samples = centers[:, None, :] + spread * noise
    features = np.clip(samples.reshape(num_classes * per_class, feature_dim), 0.0, 1.0)
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
    return Dataset(features, labels, num_classes)


def _shard_sizes(n: int, n_clients: int) -> list[int]:
    # remainder goes to the lowest-index clients, so sizes differ by at most 1
    base, extra = divmod(n, n_clients)
    return [base + (1 if i < extra else 0) for i in range(n_clients)]


def _check_client_count(n: int, n_clients: int) -> None:
    if n_clients < 1:
        raise DataError("need at least one client")
    if n_clients > n:
        raise TooManyClientsError(f"{n_clients} clients for {n} samples")


def partition_iid(ds: Dataset, n_clients: int, seed: int = 0) -> Partition:
    """Seeded random permutation split into near-equal shards."""
    _check_client_count(ds.num_samples, n_clients)
    perm = np.random.default_rng(seed).permutation(ds.num_samples)
    shards = []
    offset = 0
    for size in _shard_sizes(ds.num_samples, n_clients):
        shards.append(perm[offset:offset + size].copy())
        offset += size
    return Partition(tuple(shards))


def partition_sorted(ds: Dataset, n_clients: int) -> Partition:
    """Stable label sort, then contiguous near-equal shards.

    With n_clients >= num_classes each shard spans at most two distinct
    labels, the label-skewed regime used for non-IID experiments.
    """
    _check_client_count(ds.num_samples, n_clients)
    order = np.argsort(ds.labels, kind="stable")
    shards = []
    offset = 0
    for size in _shard_sizes(ds.num_samples, n_clients):
        shards.append(order[offset:offset + size].copy())
        offset += size
    return Partition(tuple(shards))
