"""Inference of invariant causes from pooled states, and the sparsity field they induce.

The cause cost for pooled states ``g`` and invariance bank ``G`` is::

    0.5 * (sum(lam(k) * |g|) + eta' * ||k - k'||^2 + lambda' * ||k||_1)
        + alpha * ||k - interstage||^2 / 2

with ``lam(k) = alpha' * (1 + exp(-G k))``.  The exponent is clipped to
``[-EXP_CAP, EXP_CAP]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .exceptions import ShapeError
from .ops import FilterBank, _convolve, cached_lipschitz, check_tensor4, max_unpool
from .prox import accelerated_prox_grad
from .schedules import PolynomialSchedule, RestartPolicy

__all__ = [
    "EXP_CAP",
    "CauseProblem",
    "cause_cost",
    "cause_grad",
    "infer_causes",
    "update_sparsity",
    "sparsity_weights",
]

EXP_CAP = 30.0


def _neg_exp(u):
    return np.exp(-np.clip(u, -EXP_CAP, EXP_CAP))


def sparsity_weights(drive, alpha_prime):
    """``alpha' * (1 + exp(-drive))`` with the exponent clipped."""
    return alpha_prime * (1.0 + _neg_exp(drive))


@dataclass
class CauseProblem:
    pooled_states: np.ndarray
    invariance: FilterBank
    topdown: Optional[np.ndarray] = None
    alpha_prime: float = 1.0
    lambda_prime: float = 0.2
    eta_prime: float = 0.1
    interstage: Optional[np.ndarray] = None
    alpha: float = 1.0

    def __post_init__(self):
        self.pooled_states = check_tensor4(self.pooled_states, "pooled_states")
        if self.pooled_states.shape[1] != self.invariance.in_channels:
            raise ShapeError(
                f"pooled states have {self.pooled_states.shape[1]} channels, "
                f"invariance bank maps to {self.invariance.in_channels}"
            )
        if not self.alpha_prime > 0:
            raise ValueError("alpha_prime must be positive")
        if self.lambda_prime < 0 or self.eta_prime < 0 or self.alpha < 0:
            raise ValueError("lambda_prime, eta_prime and alpha must be non-negative")
        if self.topdown is None:
            self.topdown = np.zeros(self.cause_shape)
        self.topdown = self._check(self.topdown, "topdown")
        if self.interstage is not None:
            self.interstage = self._check(self.interstage, "interstage")
        self.abs_states = np.abs(self.pooled_states)

    @property
    def cause_shape(self):
        n, _, h, w = self.pooled_states.shape
        return (n, self.invariance.n_filters, h, w)

    def _check(self, x, name):
        x = check_tensor4(x, name)
        if x.shape != self.cause_shape:
            raise ShapeError(f"{name} must have shape {self.cause_shape}, got {x.shape}")
        return x


def cause_cost(kappa, p):
    kappa = p._check(kappa, "kappa")
    return _cost(kappa, _convolve(p.invariance, kappa, "synth"), p)


def _cost(kappa, drive, p):
    total = 0.5 * (
        np.sum(sparsity_weights(drive, p.alpha_prime) * p.abs_states)
        + p.eta_prime * np.sum((kappa - p.topdown) ** 2)
        + p.lambda_prime * np.sum(np.abs(kappa))
    )
    if p.interstage is not None:
        total += 0.5 * p.alpha * np.sum((kappa - p.interstage) ** 2)
    return float(total)


def cause_grad(pi, p):
    """Gradient of the smooth part of :func:`cause_cost` at ``pi``."""
    pi = p._check(pi, "pi")
    return _grad(pi, _convolve(p.invariance, pi, "synth"), p)


def _grad(pi, drive, p):
    weighted = _neg_exp(drive) * p.abs_states
    grad = -0.5 * p.alpha_prime * _convolve(p.invariance, weighted, "analyze")
    grad += p.eta_prime * (pi - p.topdown)
    if p.interstage is not None:
        grad += p.alpha * (pi - p.interstage)
    return grad


def _lipschitz_at(drive, p, bank_norm):
    weighted = _neg_exp(drive) * p.abs_states
    peak = float(weighted.max()) if weighted.size else 0.0
    ell = 2.0 * p.eta_prime + 0.5 * p.alpha_prime * bank_norm * peak
    if p.interstage is not None:
        ell += p.alpha
    return max(ell, 1e-12)


def infer_causes(
    p,
    schedule=None,
    restart=None,
    max_iters=500,
    init=None,
    tol=1e-8,
    callback=None,
):
    """Accelerated proximal-gradient cause inference; returns ``(kappa, report)``.

    The Lipschitz bound uses the exponential weights at the starting point and
    is re-evaluated at the current iterate whenever a restart fires.
    """
    schedule = schedule if schedule is not None else PolynomialSchedule()
    restart = restart if restart is not None else RestartPolicy()
    _, _, h, w = p.pooled_states.shape
    bank_norm = cached_lipschitz(p.invariance, h, w) if np.any(p.invariance.filters) else 0.0
    x0 = np.zeros(p.cause_shape) if init is None else p._check(init, "init")
    forward = lambda x: _convolve(p.invariance, x, "synth")  # noqa: E731
    return accelerated_prox_grad(
        x0,
        grad=lambda x, drive: _grad(x, drive, p),
        cost=lambda x, drive: _cost(x, drive, p),
        weights=np.full(p.cause_shape, 0.5 * p.lambda_prime),
        lipschitz=_lipschitz_at(forward(x0), p, bank_norm),
        schedule=schedule,
        restart=restart,
        max_iters=max_iters,
        tol=tol,
        lipschitz_at=lambda x, drive: _lipschitz_at(drive, p, bank_norm),
        callback=callback,
        forward=forward,
    )


def update_sparsity(G, kappa, alpha_prime, idx):
    """State-resolution sparsity field ``alpha' * (1 + exp(-unpool(G kappa)))``."""
    kappa = check_tensor4(kappa, "kappa")
    if kappa.shape[1] != G.n_filters:
        raise ShapeError(f"kappa has {kappa.shape[1]} channels, bank expects {G.n_filters}")
    drive = max_unpool(_convolve(G, kappa, "synth"), idx)
    return sparsity_weights(drive, alpha_prime)
