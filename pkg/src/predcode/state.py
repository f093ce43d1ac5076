"""Bottom-up inference of sparse hidden states.

The state cost for stage input ``x``, dictionary ``D`` and sparsity field
``lam`` is::

    0.5 * (||x - D^T g||^2 + alpha * ||g - C g_prev||_1 + sum(lam * |g|))

In temporal mode the transition term is replaced, inside the solver, by its
Nesterov smoothing with parameter ``mu`` (a Huber function whose gradient is
a clamp).  Static mode drops the transition term.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .exceptions import ModeError, ShapeError
from .ops import (
    FilterBank,
    _convolve,
    check_tensor4,
    estimate_lipschitz,
    max_pool,
    proj_linf,
)
from .prox import accelerated_prox_grad
from .schedules import PolynomialSchedule, RestartPolicy

__all__ = [
    "StateProblem",
    "state_cost",
    "smoothed_state_cost",
    "state_smooth_grad",
    "smoothed_transition_grad",
    "infer_states",
    "apply_transition",
]


def apply_transition(weights, states):
    """Mix channels by ``weights`` (``k x k``) at every spatial site."""
    return np.einsum("kj,njyx->nkyx", weights, states)


@dataclass
class StateProblem:
    input: np.ndarray
    bank: FilterBank
    sparsity: np.ndarray
    alpha: float = 0.0
    transition: Optional[np.ndarray] = None
    prev_state: Optional[np.ndarray] = None
    mu: float = 0.05

    def __post_init__(self):
        self.input = check_tensor4(self.input, "input")
        if self.input.shape[1] != self.bank.in_channels:
            raise ShapeError(
                f"input has {self.input.shape[1]} channels, bank expects {self.bank.in_channels}"
            )
        sparsity = np.asarray(self.sparsity, dtype=np.float64)
        self.sparsity = np.broadcast_to(sparsity, self.state_shape)
        if not np.all(self.sparsity > 0):
            raise ValueError("sparsity weights must be strictly positive")
        if not self.mu > 0:
            raise ValueError("mu must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if (self.transition is None) != (self.prev_state is None):
            raise ModeError("temporal mode needs both a transition matrix and a previous state")
        if self.temporal:
            self.transition = np.asarray(self.transition, dtype=np.float64)
            k = self.bank.n_filters
            if self.transition.shape != (k, k):
                raise ShapeError(f"transition must be {(k, k)}, got {self.transition.shape}")
            self.prev_state = check_tensor4(self.prev_state, "prev_state")
            if self.prev_state.shape != self.state_shape:
                raise ShapeError(f"prev_state must have shape {self.state_shape}")

    @property
    def temporal(self):
        return self.transition is not None

    @property
    def state_shape(self):
        n, _, h, w = self.input.shape
        return (n, self.bank.n_filters, h, w)

    def anchor(self):
        """``C g_prev``, the point the transition term pulls towards."""
        return apply_transition(self.transition, self.prev_state)


def _check_gamma(gamma, p):
    gamma = check_tensor4(gamma, "gamma")
    if gamma.shape != p.state_shape:
        raise ShapeError(f"states must have shape {p.state_shape}, got {gamma.shape}")
    return gamma


def state_cost(gamma, p):
    """Exact state cost (unsmoothed transition term)."""
    gamma = _check_gamma(gamma, p)
    residual = p.input - _convolve(p.bank, gamma, "synth")
    total = np.sum(residual**2) + np.sum(p.sparsity * np.abs(gamma))
    if p.temporal and p.alpha:
        total += p.alpha * np.sum(np.abs(gamma - p.anchor()))
    return 0.5 * float(total)


def _huber(x, mu):
    ax = np.abs(x)
    return np.where(ax <= mu, x * x / (2 * mu), ax - mu / 2)


def smoothed_state_cost(gamma, p):
    """State cost with the transition term replaced by its smoothing; what the solver descends."""
    gamma = _check_gamma(gamma, p)
    anchor = p.anchor() if p.temporal else None
    return _smoothed_cost(gamma, _convolve(p.bank, gamma, "synth"), p, anchor)


def _smoothed_cost(gamma, synth, p, anchor):
    residual = p.input - synth
    total = np.sum(residual**2) + np.sum(p.sparsity * np.abs(gamma))
    if anchor is not None and p.alpha:
        total += p.alpha * np.sum(_huber(gamma - anchor, p.mu))
    return 0.5 * float(total)


def smoothed_transition_grad(pi, anchor, mu):
    """Gradient of the smoothed ``||pi - anchor||_1``: ``clamp((pi - anchor) / mu, -1, 1)``."""
    if not mu > 0:
        raise ValueError("mu must be positive")
    return proj_linf((np.asarray(pi) - anchor) / mu)


def state_smooth_grad(pi, p, anchor=None):
    """Gradient of the smooth part of the (smoothed) state cost at ``pi``."""
    if p.temporal and anchor is None:
        anchor = p.anchor()
    return _smooth_grad(pi, _convolve(p.bank, pi, "synth"), p, anchor)


def _smooth_grad(pi, synth, p, anchor):
    grad = -_convolve(p.bank, p.input - synth, "analyze")
    if anchor is not None and p.alpha:
        grad += 0.5 * p.alpha * smoothed_transition_grad(pi, anchor, p.mu)
    return grad


def infer_states(
    p,
    schedule=None,
    restart=None,
    max_iters=500,
    init=None,
    lipschitz=None,
    tol=1e-8,
    callback=None,
    pool=True,
):
    """Accelerated proximal-gradient state inference followed by 2x2 max pooling.

    Returns ``(pooled, pool_index, report)``; the unpooled states are in
    ``report.solution``.  With ``pool=False`` the unpooled states are
    returned in place of the pooled ones and the index is ``None``.  The step is ``1 / (l_D + alpha / mu)`` where
    ``l_D`` is the largest eigenvalue of ``D D^T``.
    """
    schedule = schedule if schedule is not None else PolynomialSchedule()
    restart = restart if restart is not None else RestartPolicy()
    if lipschitz is None:
        n, _, h, w = p.input.shape
        lipschitz = estimate_lipschitz(p.bank, h, w)
    if p.temporal and p.alpha:
        lipschitz += p.alpha / p.mu
    anchor = p.anchor() if p.temporal else None
    x0 = np.zeros(p.state_shape) if init is None else _check_gamma(init, p)

    gamma, report = accelerated_prox_grad(
        x0,
        grad=lambda x, fx: _smooth_grad(x, fx, p, anchor),
        cost=lambda x, fx: _smoothed_cost(x, fx, p, anchor),
        weights=0.5 * p.sparsity,
        lipschitz=lipschitz,
        schedule=schedule,
        restart=restart,
        max_iters=max_iters,
        tol=tol,
        callback=callback,
        forward=lambda x: _convolve(p.bank, x, "synth"),
    )
    if not pool:
        return gamma, None, report
    pooled, idx = max_pool(gamma)
    return pooled, idx, report
