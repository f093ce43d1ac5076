"""Iteration-matrix analysis of accelerated proximal-gradient inference.

With the shrinkage flag fixed, one accelerated step on
``0.5 * ||y - Phi x||^2 + sum(w * |x|)`` is affine in ``(x_m, x_{m-1})``::

    [x_{m+1}]   [(1 + b) P H^2   -b P H^2] [x_m    ]
    [x_m    ] = [I                0      ] [x_{m-1}] + offset

where ``P = I - Phi^T Phi / l`` and ``H`` is the diagonal sign flag of
the active coordinates.  The spectrum of this matrix ``W`` determines the
local convergence phase.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .exceptions import ShapeError
from .ops import FilterBank, toeplitz_matrix

__all__ = [
    "MAX_DIAGNOSTIC_DIM",
    "RecurrenceSnapshot",
    "PhaseLabel",
    "flag_from_iterate",
    "build_recurrence",
    "classify_phase",
    "companion",
    "oscillation_test",
    "oscillation_threshold",
    "in_half_disk",
    "measure_rate",
    "PhaseTracker",
    "write_timeline",
]

MAX_DIAGNOSTIC_DIM = 64


@dataclass
class RecurrenceSnapshot:
    W: np.ndarray
    S: np.ndarray  # W with the affine column and row appended
    flag: np.ndarray
    beta: float
    lipschitz: float
    spectrum: np.ndarray

    @property
    def rho(self):
        return float(np.max(np.abs(self.spectrum))) if self.spectrum.size else 0.0

    @property
    def dim(self):
        return self.flag.shape[0]


@dataclass(frozen=True)
class PhaseLabel:
    phase: str  # "I", "II", "III" or "IV"
    rho: float
    dominant: complex
    is_complex_pair: bool
    boundary: bool = False


def flag_from_iterate(pre_prox, threshold):
    """Diagonal of ``H``: ``sign(u)`` where ``|u| > threshold``, else 0."""
    pre = np.ravel(pre_prox)
    thr = np.broadcast_to(threshold, np.shape(pre_prox)).ravel()
    return np.where(np.abs(pre) > thr, np.sign(pre), 0.0)


def _dense(operator, grid):
    if isinstance(operator, FilterBank):
        if grid is None:
            raise ValueError("a filter bank needs the spatial grid (height, width)")
        dim = operator.n_filters * grid[0] * grid[1]
        if dim > MAX_DIAGNOSTIC_DIM:
            raise ShapeError(f"diagnostics are limited to {MAX_DIAGNOSTIC_DIM} coordinates, got {dim}")
        return toeplitz_matrix(operator, *grid)
    phi = np.asarray(operator, dtype=np.float64)
    if phi.ndim != 2:
        raise ShapeError(f"dense operator must be 2-D, got shape {phi.shape}")
    return phi


def build_recurrence(operator, flag, beta, lipschitz, grid=None, offset=None):
    """Assemble ``W`` (and its affine extension ``S``) for a fixed flag.

    ``operator`` is a dense synthesis matrix ``Phi`` or a filter bank with
    ``grid`` given.  At most :data:`MAX_DIAGNOSTIC_DIM` coordinates.
    """
    phi = _dense(operator, grid)
    k = phi.shape[1]
    if k > MAX_DIAGNOSTIC_DIM:
        raise ShapeError(f"diagnostics are limited to {MAX_DIAGNOSTIC_DIM} coordinates, got {k}")
    flag = np.asarray(flag, dtype=np.float64).ravel()
    if flag.shape != (k,):
        raise ShapeError(f"flag must have {k} entries, got {flag.shape}")
    if not np.all(np.isin(flag, (-1.0, 0.0, 1.0))):
        raise ValueError("flag entries must be -1, 0 or +1")
    if not lipschitz > 0:
        raise ValueError("lipschitz must be positive")
    P = np.eye(k) - phi.T @ phi / lipschitz
    PH2 = P * (flag * flag)[None, :]
    W = np.block([[(1 + beta) * PH2, -beta * PH2], [np.eye(k), np.zeros((k, k))]])
    S = np.zeros((2 * k + 1, 2 * k + 1))
    S[: 2 * k, : 2 * k] = W
    S[: 2 * k, -1] = 0.0 if offset is None else np.ravel(offset)
    S[-1, -1] = 1.0
    return RecurrenceSnapshot(W, S, flag, float(beta), float(lipschitz), np.linalg.eigvals(W))


def _is_complex_pair(spectrum, tol=1e-10):
    return bool(np.any(np.abs(spectrum.imag) > tol))


def classify_phase(snap, flag_changed, tol=1e-8, cluster_tol=1e-6):
    """Label the local phase of a recurrence snapshot.

    * IV: the flag changed and an eigenvalue of modulus one other than 1 exists
    * I: spectral radius below ``1 - tol``
    * II: eigenvalue 1 with a defective Jordan structure (``rank(W - I)`` test)
    * III: eigenvalue 1, non-defective

    ``boundary`` is set when the spectrum sits within ``cluster_tol`` of a
    decision boundary without meeting it at ``tol``.
    """
    eig = snap.spectrum
    rho = snap.rho
    dominant = complex(eig[np.argmax(np.abs(eig))]) if eig.size else 0j
    pair = _is_complex_pair(eig)
    mod_gap = np.abs(np.abs(eig) - 1.0)
    unit_dist = np.abs(eig - 1.0)
    on_circle = mod_gap <= cluster_tol
    at_one = unit_dist <= cluster_tol
    boundary = bool(np.any((mod_gap > tol) & (mod_gap <= cluster_tol)))

    if flag_changed and np.any(on_circle & ~at_one):
        return PhaseLabel("IV", rho, dominant, pair, boundary)
    if rho < 1.0 - tol:
        return PhaseLabel("I", rho, dominant, pair, boundary)
    if np.any(at_one):
        n = snap.W.shape[0]
        algebraic = int(np.count_nonzero(at_one))
        sv = np.linalg.svd(snap.W - np.eye(n), compute_uv=False)
        geometric = int(np.count_nonzero(sv <= tol * max(1.0, sv[0] if sv.size else 1.0)))
        phase = "II" if geometric < algebraic else "III"
        return PhaseLabel(phase, rho, dominant, pair, boundary)
    return PhaseLabel("I", rho, dominant, pair, True)


def companion(radius, beta):
    """``[[(1 + beta) r, -beta r], [1, 0]]``: one eigen-direction of ``W`` with ``P H^2`` eigenvalue ``r``."""
    return np.array([[(1.0 + beta) * radius, -beta * radius], [1.0, 0.0]])


def oscillation_test(radius, beta):
    """``"ComplexPair"`` when the companion eigenvalues are complex, else ``"RealRoots"``.

    The characteristic polynomial ``z^2 - (1 + beta) r z + beta r`` has
    discriminant ``(1 + beta)^2 r^2 - 4 beta r``.
    """
    if radius < 0 or not 0 <= beta < 1:
        raise ValueError("need radius >= 0 and 0 <= beta < 1")
    disc = (1.0 + beta) ** 2 * radius * radius - 4.0 * beta * radius
    return "ComplexPair" if disc < 0 else "RealRoots"


def oscillation_threshold(radius):
    """Smallest ``beta`` at which the companion eigenvalues turn complex."""
    if not 0 < radius <= 1:
        raise ValueError("radius must lie in (0, 1]")
    return (1.0 - np.sqrt(1.0 - radius)) ** 2 / radius


def in_half_disk(spectrum, tol=1e-8):
    """True where ``|z - 1/2| <= 1/2 + tol``."""
    return np.abs(np.asarray(spectrum) - 0.5) <= 0.5 + tol


def measure_rate(cost_trace, optimum, window=(10, 1000)):
    """Least-squares slope of ``log(cost_m - optimum)`` against ``log m`` for ``m`` in ``window``."""
    trace = np.asarray(cost_trace, dtype=np.float64)
    lo, hi = window
    hi = min(hi, trace.shape[0] - 1)
    if lo < 1 or hi <= lo:
        raise ValueError(f"window {window} is empty for a trace of length {trace.shape[0]}")
    m = np.arange(lo, hi + 1)
    gaps = trace[m] - optimum
    if np.any(gaps <= 0):
        bad = int(m[np.argmax(gaps <= 0)])
        raise ValueError(f"non-positive gap at iteration {bad}; the optimum must lie below the trace")
    slope, _ = np.polyfit(np.log(m), np.log(gaps), 1)
    return float(slope)


class PhaseTracker:
    """Solver callback recording the phase of every iteration on a dense toy problem.

    ``operator`` is the dense synthesis matrix or a filter bank with ``grid``.
    """

    def __init__(self, operator, grid=None):
        self.phi = _dense(operator, grid)
        if self.phi.shape[1] > MAX_DIAGNOSTIC_DIM:
            raise ShapeError(f"diagnostics are limited to {MAX_DIAGNOSTIC_DIM} coordinates")
        self.rows = []
        self._last_flag: Optional[np.ndarray] = None

    def __call__(self, info):
        flag = flag_from_iterate(info.pre_prox, info.threshold)
        changed = self._last_flag is not None and not np.array_equal(flag, self._last_flag)
        self._last_flag = flag
        snap = build_recurrence(self.phi, flag, info.beta, 1.0 / info.step)
        label = classify_phase(snap, changed)
        self.rows.append(
            {
                "iteration": info.iteration,
                "phase": label.phase,
                "rho": label.rho,
                "beta": float(info.beta),
                "flag_changed": int(changed),
                "complex_pair": int(label.is_complex_pair),
            }
        )


def write_timeline(rows, path):
    columns = ["iteration", "phase", "rho", "beta", "flag_changed", "complex_pair"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in columns])
