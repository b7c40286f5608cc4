"""Dataset ingestion, synthesis, batching, and noise augmentation.

Images live as flat float64 rows in [0, 1]; the per-example spatial shape
is carried alongside so convolutional networks can reshape on entry.
Sources: the MNIST IDX binary format (big-endian headers, exactly as
distributed), Gaussian class blobs for closed-form linear-model oracles,
and a deterministic rendered-digit corpus (28x28, 10 classes) for running
the full pipeline in environments where the real MNIST files are not
available.

Shuffling and augmentation use counter-based generators keyed by
(seed, epoch) and (seed, call index), so every epoch and every batch is
independently reproducible.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .rng import TAG_AUGMENT, derived_rng

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class IdxError(ValueError):
    """Malformed IDX file."""


class BadMagicError(IdxError):
    pass


class TruncatedPayloadError(IdxError):
    pass


class CountMismatchError(IdxError):
    pass


@dataclass
class Dataset:
    """Immutable image/label collection.

    images: (n, prod(image_shape)) float64 in [0, 1]
    labels: (n,) int64 in [0, n_classes)
    """

    images: np.ndarray
    labels: np.ndarray
    n_classes: int
    image_shape: tuple

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.images.ndim != 2 or len(self.images) != len(self.labels):
            raise ValueError("images must be (n, dim) with one label per row")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("label outside [0, n_classes)")
        if len(self.images) and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("pixel outside [0, 1]")
        self.image_shape = tuple(int(s) for s in self.image_shape)

    def __len__(self):
        return len(self.labels)

    def subset(self, n, offset=0):
        return Dataset(self.images[offset:offset + n], self.labels[offset:offset + n],
                       self.n_classes, self.image_shape)

    def to_csv(self, path):
        """One row per example, pixels then the label in the last column."""
        with open(path, "w") as f:
            for row, label in zip(self.images, self.labels):
                f.write(",".join(repr(v) for v in row))
                f.write(f",{label}\n")


# ---------------------------------------------------------------------------
# IDX binary format
# ---------------------------------------------------------------------------

def _read_exact(f, n, what):
    data = f.read(n)
    if len(data) != n:
        raise TruncatedPayloadError(f"{what}: expected {n} bytes, got {len(data)}")
    return data


def load_idx(images_path, labels_path, n_classes=10) -> Dataset:
    """Load an MNIST-style IDX image/label file pair.

    Pixel bytes are scaled by 1/255 into [0, 1].  Raises BadMagicError,
    TruncatedPayloadError, or CountMismatchError on malformed input.
    """
    with open(images_path, "rb") as f:
        magic, count, rows, cols = struct.unpack(">iiii", _read_exact(f, 16, "image header"))
        if magic != IDX_IMAGE_MAGIC:
            raise BadMagicError(
                f"image file magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}"
            )
        payload = _read_exact(f, count * rows * cols, "image payload")
        images = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0
        images = images.reshape(count, rows * cols)
    with open(labels_path, "rb") as f:
        magic, label_count = struct.unpack(">ii", _read_exact(f, 8, "label header"))
        if magic != IDX_LABEL_MAGIC:
            raise BadMagicError(
                f"label file magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}"
            )
        labels = np.frombuffer(_read_exact(f, label_count, "label payload"), dtype=np.uint8)
    if count != label_count:
        raise CountMismatchError(f"{count} images but {label_count} labels")
    return Dataset(images, labels.astype(np.int64), n_classes, (rows, cols, 1))


def write_idx(dataset: Dataset, images_path, labels_path):
    """Write a dataset back out in IDX format (pixels quantized to bytes)."""
    rows, cols = dataset.image_shape[0], dataset.image_shape[1]
    n = len(dataset)
    pixels = np.clip(np.rint(dataset.images * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">iiii", IDX_IMAGE_MAGIC, n, rows, cols))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">ii", IDX_LABEL_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# Synthetic datasets
# ---------------------------------------------------------------------------

def synth_blobs(n, n_classes, dim, separation, seed, std=0.05) -> Dataset:
    """Class-conditional Gaussian blobs, clipped into [0, 1].

    Class means sit at 0.5 + (separation/sqrt(2)) * u_c for orthonormal
    random directions u_c, so every pair of means is exactly `separation`
    apart.  Requires dim >= n_classes.
    """
    if separation <= 0:
        raise ValueError("separation must be positive")
    if dim < n_classes:
        raise ValueError("dim must be at least n_classes for separated means")
    rng = derived_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(dim, n_classes)))
    means = 0.5 + (separation / np.sqrt(2.0)) * q.T  # (n_classes, dim)
    labels = np.arange(n, dtype=np.int64) % n_classes
    images = means[labels] + rng.normal(0.0, std, size=(n, dim))
    np.clip(images, 0.0, 1.0, out=images)
    return Dataset(images.reshape(n, dim), labels, n_classes, (dim,))


# 5x7 dot-matrix digit glyphs, one row string per scanline.
_GLYPHS = [
    ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    ("11111", "00010", "00100", "00010", "00001", "10001", "01110"),
    ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
]


def _glyph_canvas(digit, size):
    bitmap = np.array([[float(c) for c in row] for row in _GLYPHS[digit]])
    big = np.kron(bitmap, np.ones((3, 3)))  # 21 x 15
    canvas = np.zeros((size, size))
    r0 = (size - big.shape[0]) // 2
    c0 = (size - big.shape[1]) // 2
    canvas[r0:r0 + big.shape[0], c0:c0 + big.shape[1]] = big
    return canvas


def synth_digits(n, seed, size=28) -> Dataset:
    """Deterministic rendered-digit corpus in the MNIST shape.

    Each example is a dot-matrix glyph pushed through a random affine
    warp (rotation, scale, shear, shift), a random-width blur, contrast
    jitter, and background noise.  Labels cycle 0..9 so every contiguous
    subset is class-balanced.  Same seed, same corpus.
    """
    rng = derived_rng(seed)
    templates = [_glyph_canvas(d, size) for d in range(10)]
    center = (size - 1) / 2.0
    images = np.empty((n, size * size))
    labels = np.arange(n, dtype=np.int64) % 10
    for i in range(n):
        digit = int(labels[i])
        theta = rng.uniform(-0.30, 0.30)
        scale = np.exp(rng.uniform(-0.18, 0.18))
        shear = rng.uniform(-0.18, 0.18)
        shift = rng.uniform(-2.5, 2.5, size=2)
        c, s = np.cos(theta), np.sin(theta)
        mat = np.array([[c, -s], [s, c]]) @ np.array([[1.0, shear], [0.0, 1.0]]) / scale
        offset = np.array([center, center]) - mat @ (np.array([center, center]) + shift)
        img = ndimage.affine_transform(templates[digit], mat, offset=offset, order=1)
        img = ndimage.gaussian_filter(img, sigma=rng.uniform(0.5, 1.0))
        peak = img.max()
        if peak > 0:
            img = img * (rng.uniform(0.75, 1.0) / peak)
        img += rng.normal(0.0, 0.02, size=img.shape)
        np.clip(img, 0.0, 1.0, out=img)
        images[i] = img.ravel()
    return Dataset(images, labels, 10, (size, size, 1))


# ---------------------------------------------------------------------------
# Batching and augmentation
# ---------------------------------------------------------------------------

class BatchStream:
    """Single-consumer shuffled batch iterator over a dataset.

    Each epoch's permutation comes from a counter-based generator keyed
    by (seed, epoch), so any epoch can be replayed without replaying the
    ones before it.  One epoch's batches cover the dataset exactly once;
    the final batch may be short.
    """

    def __init__(self, dataset: Dataset, batch_size, seed):
        if batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        self.dataset = dataset
        self.batch_size = int(batch_size)
        self.seed = int(seed)
        self.epoch = 0
        self._pos = 0
        self._order = self._permutation(0)

    def _permutation(self, epoch):
        bits = np.random.Philox(key=np.array([self.seed, epoch], dtype=np.uint64))
        return np.random.Generator(bits).permutation(len(self.dataset))

    def epoch_batches(self, epoch):
        """All batches of one epoch, independent of the stream cursor."""
        order = self._permutation(epoch)
        for start in range(0, len(order), self.batch_size):
            idx = order[start:start + self.batch_size]
            yield self.dataset.images[idx], self.dataset.labels[idx]

    def next_batch(self):
        if self._pos >= len(self._order):
            self.epoch += 1
            self._order = self._permutation(self.epoch)
            self._pos = 0
        idx = self._order[self._pos:self._pos + self.batch_size]
        self._pos += len(idx)
        return self.dataset.images[idx], self.dataset.labels[idx]


def gaussian_augment(batch, sigma, seed, call_index=0, clip=False):
    """batch + N(0, sigma^2) noise, elementwise, on a copy.

    Deterministic per (seed, call_index).  Not clipped to [0, 1] unless
    `clip` is set: training-time noise is allowed off the pixel range by
    default.
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    batch = np.asarray(batch, dtype=np.float64)
    if sigma == 0:
        return batch.copy()
    noise = derived_rng(seed, TAG_AUGMENT, call_index).normal(0.0, sigma, size=batch.shape)
    out = batch + noise
    if clip:
        np.clip(out, 0.0, 1.0, out=out)
    return out
