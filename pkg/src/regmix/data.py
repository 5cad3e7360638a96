"""Datasets: synthetic Gaussian blobs plus IDX and CIFAR-10 binary readers/writers."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    classes: int
    split: str = "train"
    indices: np.ndarray = field(default=None)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.indices is None:
            self.indices = np.arange(len(self.y))
        if self.x.shape[0] != self.y.shape[0]:
            raise DataFormatError(f"{self.x.shape[0]} examples but {self.y.shape[0]} labels")
        if self.x.size and (self.x.min() < 0.0 or self.x.max() > 1.0):
            raise DataFormatError("pixel values must lie in [0, 1]")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.classes):
            raise DataFormatError(f"labels must lie in [0, {self.classes})")

    def __len__(self):
        return len(self.y)

    @property
    def input_shape(self):
        return tuple(self.x.shape[1:])

    def subset(self, idx, split=None):
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.x[idx], self.y[idx], self.classes, split or self.split)

    def head(self, n):
        return self.subset(np.arange(min(n, len(self))))


@dataclass(frozen=True)
class BatchPlan:
    batch_size: int
    seed: int = 0
    epoch: int = 0


def synth_blobs(n, classes, dim, separation, seed, robust_dims=None, weak_separation=0.0):
    """Isotropic unit-variance Gaussian clusters, min-max scaled into [0, 1].

    Class means are i.i.d. N(0, separation^2) per coordinate. With
    ``robust_dims`` set, only the first ``robust_dims`` coordinates use
    ``separation``; the rest use ``weak_separation``. Many weakly separated
    coordinates are jointly predictive but cheap to attack under l-inf, which
    is what makes standard training non-robust on this data.

    Labels are assigned round-robin, so class counts differ by at most one.
    Scaling is global (one min and max over all values), preserving geometry.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    scale = np.full(dim, float(separation))
    if robust_dims is not None:
        scale[robust_dims:] = weak_separation
    means = rng.standard_normal(size=(classes, dim)) * scale
    y = np.arange(n) % classes
    y = y[rng.permutation(n)]
    x = means[y] + rng.normal(size=(n, dim))
    lo, hi = x.min(), x.max()
    x = (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x)
    return Dataset(np.clip(x, 0.0, 1.0), y, classes)


def train_test_split(ds, n_test, seed=0):
    """Disjoint train/test datasets, each re-indexed from zero."""
    if not 0 < n_test < len(ds):
        raise ValueError(f"n_test must lie in (0, {len(ds)})")
    perm = np.random.default_rng(seed).permutation(len(ds))
    return ds.subset(np.sort(perm[n_test:]), "train"), ds.subset(np.sort(perm[:n_test]), "test")


def batches(ds, plan):
    """Yield ``(indices, x, y)`` mini-batches in a (seed, epoch)-determined order."""
    if plan.batch_size < 1:
        raise ValueError("batch size must be >= 1")
    order = np.random.default_rng([plan.seed, plan.epoch]).permutation(len(ds))
    for start in range(0, len(ds), plan.batch_size):
        idx = order[start:start + plan.batch_size]
        yield ds.indices[idx], ds.x[idx], ds.y[idx]


# ---------------------------------------------------------------- IDX

def _read_bytes(path):
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def read_idx_array(path, expect_magic=None):
    """Parse an unsigned-byte IDX file into a uint8 array."""
    buf = _read_bytes(path)
    if len(buf) < 4:
        raise DataFormatError(f"{path}: truncated header ({len(buf)} bytes)")
    (magic,) = struct.unpack(">I", buf[:4])
    if expect_magic is not None and magic != expect_magic:
        raise DataFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expect_magic:08x}")
    if magic >> 8 != 0x08:
        raise DataFormatError(f"{path}: bad magic 0x{magic:08x} (only unsigned-byte IDX is supported)")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(buf) < head:
        raise DataFormatError(f"{path}: truncated header, expected {head} bytes, got {len(buf)}")
    dims = struct.unpack(f">{ndim}I", buf[4:head])
    expected = int(np.prod(dims, dtype=np.int64))
    actual = len(buf) - head
    if actual != expected:
        raise DataFormatError(f"{path}: truncated payload, expected {expected} bytes, got {actual}")
    return np.frombuffer(buf, dtype=np.uint8, offset=head).reshape(dims)


def read_idx(images_path, labels_path, split="train", classes=None):
    images = read_idx_array(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx_array(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(f"image/label count mismatch: {images.shape[0]} images, {labels.shape[0]} labels")
    if classes is None:
        classes = max(2, int(labels.max()) + 1 if labels.size else 2)
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    return Dataset(x, labels.astype(np.int64), classes, split)


def write_idx(images_path, labels_path, ds):
    """Write a single-channel dataset back out as IDX (values quantised to bytes)."""
    imgs = np.rint(ds.x.reshape(len(ds), *ds.x.shape[-2:]) * 255.0).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *imgs.shape))
        fh.write(imgs.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(ds)))
        fh.write(ds.y.astype(np.uint8).tobytes())


# ---------------------------------------------------------------- CIFAR-10 binary

def read_cifar_binary(path, split="train"):
    buf = _read_bytes(path)
    if len(buf) % CIFAR_RECORD:
        raise DataFormatError(f"{path}: size {len(buf)} is not a multiple of the {CIFAR_RECORD}-byte record")
    rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise DataFormatError(f"{path}: record {bad} has label byte {labels[bad]} > 9")
    x = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return Dataset(x, labels, 10, split)


def write_cifar_binary(path, ds):
    pix = np.rint(ds.x.reshape(len(ds), -1) * 255.0).astype(np.uint8)
    if pix.shape[1] != CIFAR_RECORD - 1:
        raise DataFormatError(f"CIFAR records hold 3x32x32 images, got input shape {list(ds.input_shape)}")
    rec = np.concatenate([ds.y.astype(np.uint8)[:, None], pix], axis=1)
    with open(path, "wb") as fh:
        fh.write(rec.tobytes())
