"""Datasets: Gaussian blobs, IDX (MNIST layout) and CSV readers, batching, mixup."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

from .losses import LabelBatch
from .numerics import DimensionError, InvalidInputError, InvalidParameterError, NKDError, make_rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class FormatError(NKDError, ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: LabelBatch
    sample_ids: np.ndarray

    def __post_init__(self):
        n = self.inputs.shape[0]
        if n == 0:
            raise InvalidInputError("dataset is empty")
        if len(self.labels) != n or self.sample_ids.shape != (n,):
            raise DimensionError("inputs, labels and sample_ids disagree on row count")
        if np.unique(self.sample_ids).size != n:
            raise InvalidInputError("sample_ids must be unique")

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def num_classes(self):
        return self.labels.num_classes

    @property
    def dim(self):
        return self.inputs.shape[1]

    @property
    def targets(self):
        return self.labels.target_index

    def subset(self, rows):
        return Dataset(self.inputs[rows], self.labels[rows], self.sample_ids[rows])


@dataclass(frozen=True)
class BlobSpec:
    num_classes: int = 10
    dim: int = 20
    samples_per_class: int = 500
    center_scale: float = 1.0
    noise_sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma <= 0:
            raise InvalidParameterError("noise_sigma must be positive")
        if self.num_classes < 2 or self.dim < 1 or self.samples_per_class < 1:
            raise InvalidParameterError("blob spec sizes must be positive (and C >= 2)")


def blob_centers(spec):
    return make_rng(spec.seed, "centers").standard_normal((spec.num_classes, spec.dim)) * spec.center_scale


def generate_blobs(spec, split="train", id_offset=0):
    """Isotropic Gaussian clusters around seeded class centres.

    Centres depend only on ``spec.seed``, so train and test splits drawn
    with different ``split`` names share them.
    """
    centers = blob_centers(spec)
    rng = make_rng(spec.seed, "points", split)
    k, n = spec.num_classes, spec.samples_per_class
    y = np.repeat(np.arange(k), n)
    x = centers[y] + rng.standard_normal((k * n, spec.dim)) * spec.noise_sigma
    ids = np.arange(k * n, dtype=np.int64) + id_offset
    return Dataset(x, LabelBatch.from_indices(y, k), ids)


def blob_splits(spec, test_per_class):
    """Train and test datasets sharing centres; test ids follow train ids."""
    train = generate_blobs(spec, "train")
    test_spec = BlobSpec(spec.num_classes, spec.dim, test_per_class,
                         spec.center_scale, spec.noise_sigma, spec.seed)
    return train, generate_blobs(test_spec, "test", id_offset=len(train))


def _read_header(buf, magic, ndim, what):
    if len(buf) < 4:
        raise FormatError(f"{what}: file too short for magic number", 0)
    (got,) = struct.unpack_from(">I", buf, 0)
    if got != magic:
        raise FormatError(f"{what}: bad magic 0x{got:08x}, expected 0x{magic:08x}", 0)
    if len(buf) < 4 + 4 * ndim:
        raise FormatError(f"{what}: truncated dimension header", len(buf))
    return struct.unpack_from(f">{ndim}I", buf, 4)


def parse_idx_images(buf):
    n, rows, cols = _read_header(buf, IDX_IMAGES_MAGIC, 3, "images")
    start = 16
    need = n * rows * cols
    if len(buf) - start < need:
        raise FormatError(f"images: expected {need} pixel bytes, found {len(buf) - start}", len(buf))
    pixels = np.frombuffer(buf, np.uint8, need, start)
    return pixels.reshape(n, rows * cols).astype(np.float64) / 255.0


def parse_idx_labels(buf):
    (n,) = _read_header(buf, IDX_LABELS_MAGIC, 1, "labels")
    start = 8
    if len(buf) - start < n:
        raise FormatError(f"labels: expected {n} label bytes, found {len(buf) - start}", len(buf))
    return np.frombuffer(buf, np.uint8, n, start).astype(np.int64)


def read_idx(images_path, labels_path, num_classes=None, id_offset=0):
    """Load an MNIST-layout image/label file pair; pixels scaled to [0, 1]."""
    with open(images_path, "rb") as f:
        x = parse_idx_images(f.read())
    with open(labels_path, "rb") as f:
        y = parse_idx_labels(f.read())
    if x.shape[0] != y.shape[0]:
        raise FormatError(f"count mismatch: {x.shape[0]} images vs {y.shape[0]} labels", 4)
    k = num_classes or int(y.max()) + 1
    if y.max() >= k:
        raise FormatError(f"label {int(y.max())} out of range for {k} classes", 8 + int(np.argmax(y)))
    ids = np.arange(len(y), dtype=np.int64) + id_offset
    return Dataset(x, LabelBatch.from_indices(y, max(k, 2)), ids)


def write_idx(images, labels, images_path, labels_path):
    """Write uint8 images (N x rows x cols) and labels in IDX layout."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


def read_csv(path, num_classes=None, id_offset=0):
    """Rows of ``label,feature,...``; a first row starting with ``label`` is a header."""
    labels, feats = [], []
    with open(path, newline="") as f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            if not row or row[0].startswith("#"):
                continue
            if lineno == 1 and row[0].strip().lower() == "label":
                continue
            try:
                labels.append(int(row[0]))
                feats.append([float(v) for v in row[1:]])
            except ValueError as e:
                raise InvalidInputError(f"{path}:{lineno}: {e}") from None
    if not labels:
        raise InvalidInputError(f"{path}: no data rows")
    if len({len(r) for r in feats}) != 1:
        raise InvalidInputError(f"{path}: rows have differing feature counts")
    y = np.asarray(labels, dtype=np.int64)
    k = num_classes or int(y.max()) + 1
    if y.min() < 0 or y.max() >= k:
        raise InvalidInputError(f"{path}: labels must lie in [0, {k})")
    ids = np.arange(len(y), dtype=np.int64) + id_offset
    return Dataset(np.asarray(feats, dtype=np.float64), LabelBatch.from_indices(y, k), ids)


def batches(dataset, batch_size, epoch_seed):
    """Yield ``(inputs, labels, sample_ids)`` over a seeded permutation; last batch may be short."""
    if batch_size < 1:
        raise InvalidParameterError("batch_size must be at least 1")
    order = make_rng(epoch_seed, "shuffle").permutation(len(dataset))
    for start in range(0, len(order), batch_size):
        rows = order[start:start + batch_size]
        yield dataset.inputs[rows], dataset.labels[rows], dataset.sample_ids[rows]


def mixup(batch_a, batch_b, lam):
    """Convex combination ``lam*a + (1-lam)*b`` of ``(inputs, labels)`` pairs."""
    if not (0.0 <= lam <= 1.0):
        raise InvalidParameterError(f"mixup coefficient must lie in [0, 1], got {lam}")
    xa, la = batch_a
    xb, lb = batch_b
    xa, xb = np.asarray(xa, dtype=np.float64), np.asarray(xb, dtype=np.float64)
    if xa.shape != xb.shape or la.values.shape != lb.values.shape:
        raise DimensionError("mixup needs batches of equal shape")
    v = lam * la.values + (1.0 - lam) * lb.values
    # re-normalise away the last-ulp drift of the convex combination
    v = v / v.sum(axis=1, keepdims=True)
    return lam * xa + (1.0 - lam) * xb, LabelBatch(v)
