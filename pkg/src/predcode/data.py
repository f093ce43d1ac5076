"""IDX image/label files, ZCA whitening, batching and synthetic fixtures."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import FormatError

__all__ = [
    "Dataset",
    "Whitening",
    "ZCAWhitener",
    "load_idx",
    "write_idx",
    "zca_whiten",
    "synth_bars",
    "batches",
    "load_dataset",
    "write_digits_idx",
    "IDX_NAMES",
]

_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {dt.newbyteorder("="): code for code, dt in _IDX_TYPES.items()}
_MAX_ELEMENTS = 2**31

IDX_NAMES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def _read_bytes(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise FormatError(f"{path}: damaged gzip stream ({exc})") from None
    return raw


def load_idx(path):
    """Parse a big-endian IDX file (optionally gzip-compressed).

    Returns ``(array, dims)`` where ``dims`` is the shape from the header.
    """
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise FormatError(f"{path}: too short for an IDX header")
    zero, code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or code not in _IDX_TYPES or ndim == 0:
        raise FormatError(f"{path}: bad magic number 0x{raw[:4].hex()}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: header truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = 1
    for d in dims:
        count *= d
        if count > _MAX_ELEMENTS:
            raise FormatError(f"{path}: dimensions {dims} overflow the element limit")
    dtype = _IDX_TYPES[code]
    expected = header + count * dtype.itemsize
    if len(raw) < expected:
        raise FormatError(f"{path}: payload truncated ({len(raw) - header} of {expected - header} bytes)")
    if len(raw) > expected:
        raise FormatError(f"{path}: {len(raw) - expected} trailing bytes after payload")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=header)
    return data.astype(dtype.newbyteorder("=")).reshape(dims), tuple(dims)


def write_idx(path, array, compress=None):
    """Write ``array`` as IDX; gzip when ``compress`` is true or the path ends in ``.gz``."""
    array = np.asarray(array)
    native = array.dtype.newbyteorder("=")
    if native not in _IDX_CODES:
        raise FormatError(f"dtype {array.dtype} has no IDX type code")
    code = _IDX_CODES[native]
    header = struct.pack(">HBB", 0, code, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    payload = header + np.ascontiguousarray(array, dtype=_IDX_TYPES[code]).tobytes()
    if compress is None:
        compress = str(path).endswith(".gz")
    if compress:
        payload = gzip.compress(payload, mtime=0)
    with open(path, "wb") as fh:
        fh.write(payload)


@dataclass(frozen=True)
class Whitening:
    """Fitted affine whitening ``(x - mean) @ matrix`` on flattened images."""

    mean: np.ndarray
    matrix: np.ndarray

    def __post_init__(self):
        for arr in (self.mean, self.matrix):
            arr.setflags(write=False)

    def apply(self, images):
        images = np.asarray(images, dtype=np.float64)
        flat = images.reshape(images.shape[0], -1)
        if flat.shape[1] != self.mean.shape[0]:
            raise ValueError(f"whitening fitted on {self.mean.shape[0]} features, got {flat.shape[1]}")
        return ((flat - self.mean) @ self.matrix).reshape(images.shape)


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray
    labels: Optional[np.ndarray] = None
    whitening: Optional[Whitening] = None

    def __len__(self):
        return self.images.shape[0]

    def subset(self, count):
        labels = None if self.labels is None else self.labels[:count]
        return Dataset(self.images[:count], labels, self.whitening)


def _fit_zca(flat, eps):
    if not eps > 0:
        raise ValueError("whitening eps must be positive")
    if flat.shape[0] < 2:
        raise ValueError("whitening needs at least two samples")
    mean = flat.mean(axis=0)
    centered = flat - mean
    cov = centered.T @ centered / flat.shape[0]
    evals, evecs = np.linalg.eigh(cov)
    evals = np.maximum(evals, 0.0)
    matrix = (evecs / np.sqrt(evals + eps)) @ evecs.T
    return Whitening(mean, matrix)


class ZCAWhitener(TransformerMixin, BaseEstimator):
    """ZCA whitening over all channels and pixels jointly.

    The fitted transform (``whitening_``) is immutable; ``transform`` only
    applies it, so a test set never refits.
    """

    def __init__(self, eps=1e-5):
        self.eps = eps

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        self.whitening_ = _fit_zca(X.reshape(X.shape[0], -1), self.eps)
        self.n_features_in_ = self.whitening_.mean.shape[0]
        return self

    def transform(self, X):
        check_is_fitted(self, "whitening_")
        return self.whitening_.apply(X)


def zca_whiten(images, eps=1e-5, labels=None):
    """Fit ZCA on ``images`` and return the whitened :class:`Dataset` carrying the transform."""
    images = np.asarray(images, dtype=np.float64)
    whitening = _fit_zca(images.reshape(images.shape[0], -1), eps)
    return Dataset(whitening.apply(images), labels, whitening)


def synth_bars(n, size=8, seed=0):
    """Images holding one full-length bar; label 0 for horizontal, 1 for vertical."""
    if size < 4:
        raise ValueError("bar images need size >= 4")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, n)
    positions = rng.integers(0, size, n)
    images = np.zeros((n, 1, size, size))
    for i, (label, pos) in enumerate(zip(labels, positions)):
        if label == 0:
            images[i, 0, pos, :] = 1.0
        else:
            images[i, 0, :, pos] = 1.0
    return Dataset(images, labels.astype(np.int64))


def batches(n, batch_size, rng=None):
    """Index arrays covering ``range(n)`` in seeded random order."""
    order = np.random.default_rng(rng).permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _find(directory, stem):
    for name in (stem, stem + ".gz"):
        path = os.path.join(directory, name)
        if os.path.exists(path):
            return path
    return None


def load_dataset(directory, split="train", limit=None):
    """Load ``split`` ('train' or 'test') from a directory of MNIST-named IDX files.

    Pixels are scaled to ``[0, 1]``.  Labels are ``None`` when their file is absent.
    """
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"data directory not found: {directory}")
    image_path = _find(directory, IDX_NAMES[f"{split}_images"])
    if image_path is None:
        raise FileNotFoundError(f"{directory}: no {IDX_NAMES[split + '_images']}[.gz]")
    images, dims = load_idx(image_path)
    if len(dims) != 3:
        raise FormatError(f"{image_path}: expected 3-D image data, got dims {dims}")
    images = images[:limit].astype(np.float64)[:, None]
    if images.max(initial=0) > 1:
        images /= 255.0
    labels = None
    label_path = _find(directory, IDX_NAMES[f"{split}_labels"])
    if label_path is not None:
        labels, _ = load_idx(label_path)
        labels = labels[:limit].astype(np.int64)
        if labels.shape[0] != images.shape[0]:
            raise FormatError(f"{label_path}: {labels.shape[0]} labels for {images.shape[0]} images")
    return Dataset(images, labels)


def write_digits_idx(directory, n_train=2000, n_test=500, size=28, seed=0):
    """Write an MNIST-format fixture built from scikit-learn's 8x8 digits.

    Each digit is upsampled to 24x24, placed on a ``size`` canvas with a
    random offset, and quantized to bytes.  Train and test images come from
    disjoint source digits.
    """
    from scipy.ndimage import zoom
    from sklearn.datasets import load_digits

    digits = load_digits()
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(digits.target))
    test_src, train_src = order[:n_test], order[n_test:]

    def render(sources, count):
        picks = rng.choice(sources, count, replace=count > len(sources))
        out = np.zeros((count, size, size), dtype=np.uint8)
        margin = size - 24
        for i, src in enumerate(picks):
            big = np.clip(zoom(digits.images[src] / 16.0, 3, order=1), 0, 1)
            dy, dx = rng.integers(0, margin + 1, 2)
            out[i, dy : dy + 24, dx : dx + 24] = np.round(big * 255).astype(np.uint8)
        return out, digits.target[picks].astype(np.uint8)

    os.makedirs(directory, exist_ok=True)
    for split, sources, count in (("train", train_src, n_train), ("test", test_src, n_test)):
        images, labels = render(sources, count)
        write_idx(os.path.join(directory, IDX_NAMES[f"{split}_images"]), images)
        write_idx(os.path.join(directory, IDX_NAMES[f"{split}_labels"]), labels)
    return directory
