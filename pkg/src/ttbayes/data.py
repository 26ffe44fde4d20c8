"""Dataset ingestion and batching: IDX files, toy generators, seeded shuffles."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DataError",
    "Dataset",
    "Batch",
    "BatchPlan",
    "one_hot",
    "load_idx",
    "epoch_batches",
    "batch_stream",
    "make_toy",
]

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class DataError(ValueError):
    """Raised for unreadable or inconsistent dataset files."""


@dataclass
class Batch:
    inputs: np.ndarray  # (batch, dim)
    labels: np.ndarray  # (batch, classes) one-hot

    def __iter__(self):
        return iter((self.inputs, self.labels))

    def __len__(self):
        return self.inputs.shape[0]


@dataclass
class Dataset:
    inputs: np.ndarray  # (count, dim), values in [0, 1]
    labels: np.ndarray  # (count, classes) one-hot
    split: str = "train"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise DataError(
                f"{self.inputs.shape[0]} inputs vs {self.labels.shape[0]} labels"
            )
        rows = self.labels.sum(axis=1)
        if self.labels.size and not (
            np.all(rows == 1.0) and np.isin(self.labels, (0.0, 1.0)).all()
        ):
            raise DataError("labels must be one-hot rows")

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def class_count(self) -> int:
        return self.labels.shape[1]

    def take(self, indices) -> "Dataset":
        return Dataset(self.inputs[indices], self.labels[indices], self.split)


@dataclass(frozen=True)
class BatchPlan:
    batch_size: int
    seed: int = 0
    epoch: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DataError(
            f"label values outside [0, {num_classes}): min {labels.min()}, max {labels.max()}"
        )
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def _read_header(f, path, magic_expected, n_dims, kind):
    head = f.read(4 * (1 + n_dims))
    if len(head) < 4 * (1 + n_dims):
        raise DataError(f"{path}: truncated {kind} header")
    fields = struct.unpack(f">{1 + n_dims}i", head)
    if fields[0] != magic_expected:
        raise DataError(
            f"{path}: bad {kind} magic number {fields[0]:#010x}, expected {magic_expected:#010x}"
        )
    return fields[1:]


def load_idx(images_path, labels_path, num_classes: int = 10, split: str = "train") -> Dataset:
    """Load an IDX image/label pair; pixels scaled to [0, 1] by /255."""
    with open(images_path, "rb") as f:
        count, rows, cols = _read_header(f, images_path, IMAGES_MAGIC, 3, "image")
        payload = f.read()
    expected = count * rows * cols
    if len(payload) < expected:
        raise DataError(
            f"{images_path}: truncated pixel data ({len(payload)} of {expected} bytes)"
        )
    images = np.frombuffer(payload[:expected], dtype=np.uint8).reshape(count, rows * cols)

    with open(labels_path, "rb") as f:
        (label_count,) = _read_header(f, labels_path, LABELS_MAGIC, 1, "label")
        label_payload = f.read()
    if len(label_payload) < label_count:
        raise DataError(
            f"{labels_path}: truncated label data ({len(label_payload)} of {label_count} bytes)"
        )
    if label_count != count:
        raise DataError(
            f"image count {count} != label count {label_count}"
        )
    labels = np.frombuffer(label_payload[:label_count], dtype=np.uint8)
    return Dataset(images / 255.0, one_hot(labels, num_classes), split)


def epoch_batches(dataset: Dataset, plan: BatchPlan):
    """Yield minibatches covering the dataset exactly once, in a seeded shuffle.

    The permutation depends on (seed, epoch); the final partial batch is kept.
    """
    rng = np.random.default_rng([plan.seed, plan.epoch])
    order = rng.permutation(len(dataset))
    for start in range(0, len(dataset), plan.batch_size):
        idx = order[start : start + plan.batch_size]
        yield Batch(dataset.inputs[idx], dataset.labels[idx])


def batch_stream(dataset: Dataset, batch_size: int, seed: int = 0):
    """Endless minibatch generator cycling over epochs of :func:`epoch_batches`."""
    epoch = 0
    while True:
        yield from epoch_batches(dataset, BatchPlan(batch_size, seed, epoch))
        epoch += 1


def make_toy(kind: str, count: int, seed: int = 0, separation: float = 10.0) -> Dataset:
    """Small 2-D labeled datasets for tests.

    ``two_gaussians``: two unit-variance clusters ``separation`` apart along
    the first axis, linearly separable for large separation.  ``xor``: the
    four corners (+-1, +-1) labeled by sign product, repeated with small
    jitter when count > 4; never linearly separable.
    """
    if count < 4:
        raise ValueError("count must be >= 4")
    rng = np.random.default_rng(seed)
    if kind == "two_gaussians":
        labels = rng.integers(0, 2, size=count)
        centers = np.where(labels[:, None] == 1, separation / 2.0, -separation / 2.0)
        centers = centers * np.array([1.0, 0.0])
        inputs = centers + rng.normal(size=(count, 2))
    elif kind == "xor":
        corners = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]])
        reps = corners[np.arange(count) % 4]
        jitter = rng.normal(scale=0.1, size=(count, 2)) if count > 4 else 0.0
        inputs = reps + jitter
        labels = (reps[:, 0] * reps[:, 1] < 0).astype(np.int64)
    else:
        raise ValueError(f"unknown toy dataset {kind!r}")
    # map into [0, 1] so the Dataset invariant on pixel-like inputs holds
    lo = inputs.min(axis=0)
    hi = inputs.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    inputs = (inputs - lo) / span
    return Dataset(inputs, one_hot(labels, 2))
