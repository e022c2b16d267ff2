"""Toy datasets and the MNIST IDX reader."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .engine import Dataset
from .errors import FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def xshape(n_per_class: int = 1000, noise: float = 0.08, seed: int = 0) -> Dataset:
    """Two classes along the diagonals of [-1, 1]^2: class 0 on y = x, class 1 on y = -x."""
    rng = np.random.default_rng(seed)
    t = rng.uniform(-1.0, 1.0, size=(2, n_per_class))
    a = np.stack([t[0], t[0]], axis=1)
    b = np.stack([t[1], -t[1]], axis=1)
    x = np.concatenate([a, b]) + noise * rng.standard_normal((2 * n_per_class, 2))
    y = np.repeat(np.arange(2), n_per_class)
    perm = rng.permutation(len(x))
    return Dataset(x[perm], y[perm])


def sawtooth(x, peaks: int = 2):
    """Triangle wave of period 1 on [0, peaks]: 0 at integers, 1 at half-integers."""
    x = np.asarray(x, dtype=np.float64)
    return 1.0 - np.abs(2.0 * np.mod(x, 1.0) - 1.0)


def sawtooth_dataset(peaks: int = 2, n: int = 200) -> Dataset:
    x = np.linspace(0.0, peaks, n)
    return Dataset(x[:, None], sawtooth(x, peaks)[:, None])


def _read_header(blob: bytes, magic: int, ndims: int, what: str):
    need = 4 * (ndims + 1)
    if len(blob) < 4:
        raise FormatError(f"{what}: file too short for a magic number", len(blob))
    (got,) = struct.unpack(">I", blob[:4])
    if got != magic:
        raise FormatError(f"{what}: bad magic 0x{got:08x}, expected 0x{magic:08x}", 0)
    if len(blob) < need:
        raise FormatError(f"{what}: truncated header", len(blob))
    return struct.unpack(f">{ndims}I", blob[4:need]), need


def load_mnist_idx(images_path, labels_path) -> Dataset:
    """Read an IDX image/label pair; images come back as (n, 1, rows, cols) in [0, 1]."""
    img = Path(images_path).read_bytes()
    lab = Path(labels_path).read_bytes()
    (count, rows, cols), off = _read_header(img, IDX_IMAGES_MAGIC, 3, "images")
    end = off + count * rows * cols
    if len(img) < end:
        raise FormatError(f"images: expected {count * rows * cols} pixel bytes", len(img))
    (lcount,), loff = _read_header(lab, IDX_LABELS_MAGIC, 1, "labels")
    if lcount != count:
        raise FormatError(f"labels: count {lcount} does not match {count} images", 4)
    if len(lab) < loff + lcount:
        raise FormatError(f"labels: expected {lcount} label bytes", len(lab))
    pixels = np.frombuffer(img, dtype=np.uint8, count=count * rows * cols, offset=off)
    labels = np.frombuffer(lab, dtype=np.uint8, count=lcount, offset=loff)
    x = pixels.reshape(count, 1, rows, cols).astype(np.float64) / 255.0
    return Dataset(x, labels.astype(np.int64))


def write_idx(images, labels, images_path, labels_path):
    """Write uint8 images ``(n, rows, cols)`` and labels ``(n,)`` as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">4I", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">2I", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


def digits(test_fraction: float = 0.25, seed: int = 0):
    """The 8x8 handwritten digits bundled with scikit-learn, as (train, test) in NCHW."""
    from sklearn.datasets import load_digits

    d = load_digits()
    x = (d.images / 16.0)[:, None, :, :]
    y = d.target.astype(np.int64)
    perm = np.random.default_rng(seed).permutation(len(x))
    n_test = int(round(test_fraction * len(x)))
    test, train = perm[:n_test], perm[n_test:]
    return Dataset(x[train], y[train]), Dataset(x[test], y[test])


def split(data: Dataset, test_fraction: float, seed: int = 0):
    perm = np.random.default_rng(seed).permutation(len(data))
    n_test = int(round(test_fraction * len(data)))
    return data.subset(perm[n_test:]), data.subset(perm[:n_test])
