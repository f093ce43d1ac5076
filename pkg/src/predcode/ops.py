"""Linear and nonlinear primitives shared by every solver.

Arrays follow the ``(batch, channels, height, width)`` layout throughout.
A :class:`FilterBank` holds ``q`` synthesis filters of shape
``(in_channels, f, f)``; synthesizing from states with ``q`` channels gives
a tensor with ``in_channels`` channels and the same spatial size (zero
'same' padding, odd ``f``).  Synthesis is a cross-correlation sum over the
state channels; :func:`conv_analyze` is its exact adjoint.

Both directions are evaluated with zero-padded real FFTs whose length
covers the full linear convolution, so there is no wrap-around.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft

from .exceptions import CorruptionError, DegenerateError, ShapeError

__all__ = [
    "FilterBank",
    "PoolIndex",
    "check_tensor4",
    "conv_synthesize",
    "conv_analyze",
    "filter_correlation",
    "toeplitz_matrix",
    "max_pool",
    "max_unpool",
    "shrink",
    "proj_linf",
    "estimate_lipschitz",
    "cached_lipschitz",
]


def _workers():
    value = os.environ.get("PREDCODE_THREADS")
    return int(value) if value else 1


def check_tensor4(x, name="x"):
    """Return ``x`` as a finite float64 array with four dimensions."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (n, c, h, w), got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


@dataclass(eq=False)
class FilterBank:
    """Convolutional dictionary with filters of shape ``(q, in_channels, f, f)``.

    The bank is treated as immutable: learning steps build a new instance.
    Spectra used by the FFT path are cached per spatial grid.
    """

    filters: np.ndarray
    _spectra: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        filters = np.array(self.filters, dtype=np.float64)
        if filters.ndim != 4 or filters.shape[2] != filters.shape[3]:
            raise ShapeError(f"filters must have shape (q, c, f, f), got {filters.shape}")
        if filters.shape[2] % 2 == 0:
            raise ShapeError(f"filter size must be odd, got {filters.shape[2]}")
        if not np.all(np.isfinite(filters)):
            raise ValueError("filters contain non-finite values")
        filters.setflags(write=False)
        self.filters = filters

    @property
    def n_filters(self):
        return self.filters.shape[0]

    @property
    def in_channels(self):
        return self.filters.shape[1]

    @property
    def size(self):
        return self.filters.shape[2]

    @property
    def pad(self):
        return self.size // 2

    def norms(self):
        """Euclidean norm of each filter."""
        return np.sqrt(np.sum(self.filters**2, axis=(1, 2, 3)))

    def normalized(self):
        """Copy with every filter scaled to unit norm (zero filters left as-is)."""
        norms = self.norms()
        norms = np.where(norms > 0, norms, 1.0)
        return FilterBank(self.filters / norms[:, None, None, None])

    @classmethod
    def random(cls, n_filters, in_channels, size, rng=None):
        """Gaussian filters normalized to unit norm."""
        rng = np.random.default_rng(rng)
        return cls(rng.standard_normal((n_filters, in_channels, size, size))).normalized()

    @classmethod
    def identity(cls, channels):
        """``1x1`` bank that maps channel ``j`` onto channel ``j``."""
        return cls(np.eye(channels)[:, :, None, None])

    def spectra(self, height, width):
        key = (height, width)
        cached = self._spectra.get(key)
        if cached is None:
            f = self.size
            shape = (
                sfft.next_fast_len(height + f - 1, real=True),
                sfft.next_fast_len(width + f - 1, real=True),
            )
            flipped = self.filters[:, :, ::-1, ::-1]
            synth = sfft.rfft2(flipped, s=shape, workers=_workers())
            analyze = sfft.rfft2(self.filters, s=shape, workers=_workers())
            # (freq_h, freq_w, q, c) so channel mixing is a batched matmul
            cached = (
                shape,
                np.ascontiguousarray(synth.transpose(2, 3, 0, 1)),
                np.ascontiguousarray(analyze.transpose(2, 3, 1, 0)),
            )
            self._spectra[key] = cached
        return cached


@dataclass(frozen=True)
class PoolIndex:
    """Argmax position (0..3, row-major in the 2x2 window) of every pooled cell."""

    argmax: np.ndarray
    shape: tuple

    @property
    def pooled_shape(self):
        return self.argmax.shape


def _convolve(bank, x, direction):
    n, _, h, w = x.shape
    shape, synth, analyze = bank.spectra(h, w)
    kernel = synth if direction == "synth" else analyze
    # spatial axes first so the channel mix is one batched matmul per frequency
    freq = sfft.rfft2(x.transpose(2, 3, 0, 1), s=shape, axes=(0, 1), workers=_workers())
    full = sfft.irfft2(np.matmul(freq, kernel), s=shape, axes=(0, 1), workers=_workers())
    p = bank.pad
    return np.ascontiguousarray(full[p : p + h, p : p + w].transpose(2, 3, 0, 1))


def conv_synthesize(bank, states):
    """Sum over state channels of each state map correlated with its filter.

    ``states`` has ``bank.n_filters`` channels; the output has
    ``bank.in_channels`` channels and the same spatial size.
    """
    states = check_tensor4(states, "states")
    if states.shape[1] != bank.n_filters:
        raise ShapeError(
            f"states have {states.shape[1]} channels but the bank has {bank.n_filters} filters"
        )
    return _convolve(bank, states, "synth")


def conv_analyze(bank, residual):
    """Adjoint of :func:`conv_synthesize`."""
    residual = check_tensor4(residual, "residual")
    if residual.shape[1] != bank.in_channels:
        raise ShapeError(
            f"residual has {residual.shape[1]} channels but the bank expects {bank.in_channels}"
        )
    return _convolve(bank, residual, "analyze")


def filter_correlation(residual, states, size):
    """Correlate ``residual`` with ``states`` over all filter offsets.

    Returns an array ``g`` of shape ``(q, c, size, size)`` with
    ``g[q, c, a, b] = sum residual[n, c, y, x] * states[n, q, y + a - p, x + b - p]``,
    which is minus the gradient of ``0.5 * ||residual||^2`` with respect to
    the filters when ``residual = target - conv_synthesize(bank, states)``.
    """
    residual = check_tensor4(residual, "residual")
    states = check_tensor4(states, "states")
    if residual.shape[0] != states.shape[0] or residual.shape[2:] != states.shape[2:]:
        raise ShapeError(f"residual {residual.shape} and states {states.shape} do not align")
    if size % 2 == 0:
        raise ShapeError(f"filter size must be odd, got {size}")
    p = size // 2
    _, _, h, w = states.shape
    padded = np.pad(states, ((0, 0), (0, 0), (p, p), (p, p)))
    out = np.empty((states.shape[1], residual.shape[1], size, size))
    for a in range(size):
        for b in range(size):
            window = padded[:, :, a : a + h, b : b + w]
            out[:, :, a, b] = np.tensordot(window, residual, axes=([0, 2, 3], [0, 2, 3]))
    return out


def toeplitz_matrix(bank, height, width):
    """Dense matrix of :func:`conv_synthesize` for one sample on an ``height x width`` grid.

    Rows index ``(c, y, x)`` of the output and columns ``(q, y, x)`` of the
    states, both in C order.  Built entry by entry from the index formula,
    independently of the FFT path.
    """
    q, c, f, _ = bank.filters.shape
    p = f // 2
    mat = np.zeros((c * height * width, q * height * width))
    ys, xs = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    ys, xs = ys.ravel(), xs.ravel()
    for a in range(f):
        for b in range(f):
            src_y, src_x = ys + a - p, xs + b - p
            ok = (src_y >= 0) & (src_y < height) & (src_x >= 0) & (src_x < width)
            out_pix = (ys * width + xs)[ok]
            src_pix = (src_y * width + src_x)[ok]
            for qi in range(q):
                for ci in range(c):
                    mat[ci * height * width + out_pix, qi * height * width + src_pix] += bank.filters[
                        qi, ci, a, b
                    ]
    return mat


def max_pool(x):
    """Non-overlapping 2x2 max pooling; ties resolve to the first cell in row-major order."""
    x = check_tensor4(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool needs even spatial dims, got {(h, w)}")
    windows = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    windows = windows.reshape(n, c, h // 2, w // 2, 4)
    argmax = np.argmax(windows, axis=-1).astype(np.int8)
    pooled = np.take_along_axis(windows, argmax[..., None].astype(np.intp), axis=-1)[..., 0]
    return pooled, PoolIndex(argmax, (h, w))


def max_unpool(p, idx):
    """Scatter pooled values back to their recorded argmax cells; zeros elsewhere.

    ``max_pool(max_unpool(p, idx))`` returns ``p`` exactly when ``p >= 0``.
    """
    p = check_tensor4(p, "p")
    if p.shape != idx.argmax.shape:
        raise ShapeError(f"pooled tensor {p.shape} does not match index {idx.argmax.shape}")
    arg = idx.argmax
    if arg.size and (arg.min() < 0 or arg.max() > 3):
        raise CorruptionError("pool index outside its 2x2 window")
    n, c, h2, w2 = p.shape
    h, w = idx.shape
    if (h, w) != (2 * h2, 2 * w2):
        raise CorruptionError(f"pool index records shape {(h, w)} for pooled grid {(h2, w2)}")
    windows = np.zeros((n, c, h2, w2, 4))
    np.put_along_axis(windows, arg[..., None].astype(np.intp), p[..., None], axis=-1)
    return windows.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)


def shrink(x, tau):
    """Soft thresholding ``sign(x) * max(|x| - tau, 0)``."""
    tau = np.asarray(tau, dtype=np.float64)
    if np.any(tau < 0):
        raise ValueError("shrink threshold must be non-negative")
    return np.sign(x) * np.maximum(np.abs(x) - tau, 0.0)


def proj_linf(x):
    """Projection onto the unit L-infinity ball."""
    return np.clip(x, -1.0, 1.0)


def estimate_lipschitz(bank, height, width, tol=1e-6, max_iter=200):
    """Largest eigenvalue of ``v -> analyze(synthesize(v))`` on an ``height x width`` grid.

    Power iteration from the normalized all-ones vector; stops once the
    Rayleigh quotient changes by less than ``tol`` (relative).
    """
    if not np.any(bank.filters):
        raise DegenerateError("cannot estimate the Lipschitz constant of an all-zero bank")
    v = np.ones((1, bank.n_filters, height, width))
    v /= np.linalg.norm(v)
    estimate = 0.0
    for _ in range(max_iter):
        u = _convolve(bank, _convolve(bank, v, "synth"), "analyze")
        new = float(np.vdot(v, u))
        norm = np.linalg.norm(u)
        if norm == 0:
            raise DegenerateError("power iteration collapsed to zero")
        v = u / norm
        if estimate > 0 and abs(new - estimate) <= tol * new:
            estimate = new
            break
        estimate = new
    return estimate


def cached_lipschitz(bank, height, width):
    """:func:`estimate_lipschitz` memoized on the (immutable) bank."""
    key = ("lipschitz", height, width)
    if key not in bank._spectra:
        bank._spectra[key] = estimate_lipschitz(bank, height, width)
    return bank._spectra[key]
