"""Datasets: synthetic 2-D classification sets and IDX image files."""

import csv
import gzip
import struct
from dataclasses import dataclass, field
from typing import Iterator, Optional, Tuple

import numpy as np

from .errors import IdxFormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Normalization:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, x):
        return (x - _channel_view(self.mean, x)) / _channel_view(self.std, x)

    def invert(self, x):
        return x * _channel_view(self.std, x) + _channel_view(self.mean, x)


def _channel_view(v, x):
    return np.asarray(v).reshape((1, -1) + (1,) * (x.ndim - 2))


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int
    split: str = "train"
    normalization: Optional[Normalization] = field(default=None, repr=False)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise ValueError(f"Dataset: {len(self.x)} inputs but {len(self.y)} labels")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ValueError("Dataset: labels outside [0, num_classes)")

    def __len__(self):
        return len(self.y)

    @property
    def input_shape(self):
        return self.x.shape[1:]

    def to_csv(self, path):
        """Write ``label,x0,x1,...`` rows; inputs are flattened."""
        flat = self.x.reshape(len(self), -1)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["label"] + [f"x{i}" for i in range(flat.shape[1])])
            for label, row in zip(self.y, flat):
                w.writerow([int(label)] + [repr(float(v)) for v in row])


def gen_synthetic(kind: str, n: int, classes: int, noise: float, seed: int,
                  split: str = "train") -> Dataset:
    """Deterministic 2-D toy problems with exactly ``n`` points per class.

    ``gaussians`` puts one isotropic blob per class on the unit circle;
    ``spirals`` interleaves ``classes`` arms, a task small nets overfit easily.
    """
    if n < 1:
        raise ValueError(f"gen_synthetic: n must be >= 1, got {n}")
    if classes < 2:
        raise ValueError(f"gen_synthetic: need at least 2 classes, got {classes}")
    if noise < 0:
        raise ValueError(f"gen_synthetic: noise must be >= 0, got {noise}")
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for c in range(classes):
        if kind == "gaussians":
            angle = 2 * np.pi * c / classes
            centre = np.array([np.cos(angle), np.sin(angle)])
            pts = centre + noise * rng.standard_normal((n, 2))
        elif kind == "spirals":
            t = rng.uniform(0.0, 1.0, n)
            radius = 0.1 + 0.9 * t
            angle = 2 * np.pi * c / classes + 3.0 * np.pi * t
            pts = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
            pts = pts + noise * rng.standard_normal((n, 2))
        else:
            raise ValueError(f"gen_synthetic: unknown kind {kind!r}")
        xs.append(pts)
        ys.append(np.full(n, c))
    return Dataset(np.concatenate(xs), np.concatenate(ys), classes, split)


# -- IDX ------------------------------------------------------------------------


def _read_bytes(path):
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(raw: bytes, magic: int, what: str):
    if len(raw) < 8:
        raise IdxFormatError(f"{what}: truncated header", len(raw))
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IdxFormatError(f"{what}: bad magic 0x{found:08x}, expected 0x{magic:08x}", 0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{what}: truncated header", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) < header + count:
        raise IdxFormatError(f"{what}: truncated payload, expected {count} bytes", len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def read_idx_images(path) -> np.ndarray:
    return _parse_idx(_read_bytes(path), IDX_IMAGES_MAGIC, str(path))


def read_idx_labels(path) -> np.ndarray:
    return _parse_idx(_read_bytes(path), IDX_LABELS_MAGIC, str(path))


def fit_normalization(x: np.ndarray) -> Normalization:
    axes = (0,) + tuple(range(2, x.ndim))
    std = x.std(axis=axes)
    return Normalization(x.mean(axis=axes), np.where(std > 0, std, 1.0))


def load_idx(images_path, labels_path, normalization: Optional[Normalization] = None,
             split: str = "train", num_classes: int = 10) -> Dataset:
    """Load an IDX image/label pair as ``(n, 1, rows, cols)`` scaled to [0, 1].

    Normalization statistics are fitted on this split unless ``normalization``
    is given (pass the train split's to a test split).
    """
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        # the label count lives right after the 4-byte magic
        raise IdxFormatError(f"{len(images)} images but {len(labels)} labels in {labels_path}", 4)
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    if normalization is None:
        normalization = fit_normalization(x)
    return Dataset(normalization.apply(x), labels.astype(np.int64), num_classes, split, normalization)


def write_idx(path, array: np.ndarray) -> None:
    """Write uint8 data as IDX; 3-D arrays get the image magic, 1-D the label magic."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


class BatchIterator:
    """Shuffled mini-batches whose order is a pure function of ``(seed, epoch)``.

    The final batch of an epoch may be short so every example is visited once.
    ``hflip`` mirrors image batches left-right with probability 1/2 per example.
    """

    def __init__(self, dataset: Dataset, batch_size: int, seed: int = 0, hflip: bool = False):
        if batch_size < 1:
            raise ValueError("BatchIterator: batch_size must be >= 1")
        self.dataset = dataset
        self.batch_size = batch_size
        self.seed = seed
        self.hflip = hflip
        self.epoch = 0

    def __len__(self):
        return -(-len(self.dataset) // self.batch_size)

    def order(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.seed, epoch]).permutation(len(self.dataset))

    def epoch_batches(self, epoch: int) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        idx = self.order(epoch)
        flip_rng = np.random.default_rng([self.seed, epoch, 1])
        for start in range(0, len(idx), self.batch_size):
            sel = idx[start:start + self.batch_size]
            x = self.dataset.x[sel]
            if self.hflip and x.ndim == 4:
                flip = flip_rng.uniform(size=len(sel)) < 0.5
                x = np.where(flip[:, None, None, None], x[..., ::-1], x)
            yield x, self.dataset.y[sel]

    def __iter__(self):
        batches = self.epoch_batches(self.epoch)
        self.epoch += 1
        return batches
