"""Evaluation of learned features: kNN, reconstruction error, receptive fields."""

from __future__ import annotations

import csv
import os
import warnings

import numpy as np

from .exceptions import DegenerateError, ShapeError
from .ops import PoolIndex, _convolve, max_unpool

__all__ = [
    "knn_classify",
    "reconstruction_error",
    "backproject_fields",
    "filter_similarity",
    "write_pgm",
    "read_pgm",
    "export_fields",
    "write_matrix_csv",
]


def knn_classify(train_feats, train_labels, test_feats, k=7, test_labels=None, chunk=256):
    """Majority vote among the ``k`` Euclidean nearest neighbours.

    Neighbour ties keep training order and vote ties go to the smallest
    label, so results do not depend on the platform.  Returns
    ``(predictions, error_rate)``; the rate is ``None`` without ``test_labels``.
    """
    train = np.asarray(train_feats, dtype=np.float64).reshape(len(train_feats), -1)
    test = np.asarray(test_feats, dtype=np.float64).reshape(len(test_feats), -1)
    labels = np.asarray(train_labels)
    if train.shape[0] == 0:
        raise ValueError("training set is empty")
    if labels.shape[0] != train.shape[0]:
        raise ShapeError(f"{labels.shape[0]} labels for {train.shape[0]} training points")
    if train.shape[1] != test.shape[1]:
        raise ShapeError(f"feature sizes differ: {train.shape[1]} vs {test.shape[1]}")
    if not 1 <= k <= train.shape[0]:
        raise ValueError(f"k must lie in [1, {train.shape[0]}], got {k}")
    classes, encoded = np.unique(labels, return_inverse=True)
    train_sq = np.einsum("ij,ij->i", train, train)
    preds = np.empty(test.shape[0], dtype=classes.dtype)
    for start in range(0, test.shape[0], chunk):
        block = test[start : start + chunk]
        dist = train_sq[None, :] - 2.0 * block @ train.T + np.einsum("ij,ij->i", block, block)[:, None]
        nearest = np.argsort(dist, axis=1, kind="stable")[:, :k]
        for row, idx in enumerate(nearest):
            preds[start + row] = classes[np.argmax(np.bincount(encoded[idx], minlength=len(classes)))]
    error = None
    if test_labels is not None:
        error = float(np.mean(preds != np.asarray(test_labels)))
    return preds, error


def reconstruction_error(net, batch=None, stage=None, results=None):
    """Stage-wise ``100 * ||input - D^T states||^2 / ||input||^2`` over the batch.

    Pass ``results`` from :meth:`forward_infer` to avoid re-running inference.
    Returns one value per stage, or a float when ``stage`` (1-based) is given.
    """
    if results is None:
        results = net.forward_infer(batch)
    out = []
    for i, r in enumerate(results):
        energy = float(np.sum(r.input**2))
        if energy == 0:
            raise ValueError(f"stage {i + 1} input has zero energy")
        residual = r.input - _convolve(net.stages_[i].D, r.states, "synth")
        out.append(100.0 * float(np.sum(residual**2)) / energy)
    if stage is not None:
        return out[stage - 1]
    return out


def _top_left_index(shape):
    n, c, h, w = shape
    return PoolIndex(np.zeros((n, c, h, w), dtype=np.int8), (2 * h, 2 * w))


def _field_radius(stages):
    radius = 0
    for i, s in enumerate(stages, start=1):
        radius += s.G.pad * 2**i + s.D.pad * 2 ** (i - 1)
    return radius


def backproject_fields(stages, stage, normalize=True):
    """Pixel-space pattern synthesized from a one-hot cause for every unit of ``stage``.

    ``stages`` is a list of stage parameters (or a fitted network).  Each
    level applies the invariance bank, unpools to the top-left cell of each
    window, and synthesizes through the dictionary.  Returns
    ``(fields, degenerate)`` with fields of shape ``(d, c, H, W)`` scaled to
    ``[0, 1]`` per field; ``degenerate`` marks constant fields.
    """
    stages = list(getattr(stages, "stages_", stages))
    if not 1 <= stage <= len(stages):
        raise ValueError(f"stage must lie in [1, {len(stages)}], got {stage}")
    stack = stages[:stage]
    scale = 2**stage
    grid = 2 * int(np.ceil(_field_radius(stack) / scale)) + 1
    d = stack[-1].cause_channels
    x = np.zeros((d, d, grid, grid))
    x[np.arange(d), np.arange(d), grid // 2, grid // 2] = 1.0
    for s in reversed(stack):
        drive = _convolve(s.G, x, "synth")
        x = _convolve(s.D, max_unpool(drive, _top_left_index(drive.shape)), "synth")
    degenerate = np.zeros(d, dtype=bool)
    if normalize:
        lo = x.min(axis=(1, 2, 3), keepdims=True)
        span = x.max(axis=(1, 2, 3), keepdims=True) - lo
        degenerate = span.ravel() == 0
        x = np.where(span > 0, (x - lo) / np.where(span > 0, span, 1.0), 0.0)
    return x, degenerate


def filter_similarity(fields):
    """Pairwise cosine similarity of flattened fields.

    Zero-norm fields are dropped with a warning.  Returns ``(matrix, kept)``
    where ``kept`` indexes the fields that remain.
    """
    flat = np.asarray(fields, dtype=np.float64).reshape(len(fields), -1)
    if flat.shape[0] < 2:
        raise ValueError("need at least two fields")
    norms = np.linalg.norm(flat, axis=1)
    kept = np.flatnonzero(norms > 0)
    if len(kept) < flat.shape[0]:
        warnings.warn(f"{flat.shape[0] - len(kept)} zero-norm fields excluded from similarity", stacklevel=2)
    if len(kept) == 0:
        raise DegenerateError("every field has zero norm")
    unit = flat[kept] / norms[kept, None]
    sim = unit @ unit.T
    sim = 0.5 * (sim + sim.T)
    np.fill_diagonal(sim, 1.0)
    return sim, kept


def write_pgm(path, image):
    """8-bit binary PGM of a 2-D image with values in ``[0, 1]``."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ShapeError(f"PGM needs a 2-D image, got shape {image.shape}")
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (image.shape[1], image.shape[0]))
        fh.write(pixels.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    width, height, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    pixels = np.frombuffer(parts[4][: width * height], dtype=np.uint8)
    return pixels.reshape(height, width).astype(np.float64) / maxval


def export_fields(fields, directory, stage, degenerate=None):
    """One PGM per unit (channels tiled side by side) plus ``fields_stage<k>.csv``."""
    os.makedirs(directory, exist_ok=True)
    if degenerate is None:
        degenerate = np.zeros(len(fields), dtype=bool)
    manifest = os.path.join(directory, f"fields_stage{stage}.csv")
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["file", "stage", "unit", "height", "width", "degenerate"])
        for unit, field in enumerate(fields):
            image = np.concatenate(list(field), axis=1)
            name = f"stage{stage}_unit{unit:04d}.pgm"
            write_pgm(os.path.join(directory, name), image)
            writer.writerow([name, stage, unit, image.shape[0], image.shape[1], int(degenerate[unit])])
    return manifest


def write_matrix_csv(path, matrix, labels=None):
    matrix = np.asarray(matrix)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if labels is not None:
            writer.writerow([""] + list(labels))
        for i, row in enumerate(matrix):
            cells = [repr(float(v)) for v in row]
            writer.writerow(([labels[i]] if labels is not None else []) + cells)
