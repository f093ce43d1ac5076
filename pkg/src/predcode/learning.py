"""Parameter updates run once inference on a batch has settled.

Two trainers share the same update directions:

* ``dual``: ``P += noise + psi * (direction + theta * (P - P_prev))``
* ``adam``: bias-corrected ADAM on ``-direction``

Filter banks are rescaled to unit-norm filters after every update.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import DivergenceError, ModeError, ShapeError
from .cause import _neg_exp
from .ops import FilterBank, _convolve, check_tensor4, filter_correlation
from .state import apply_transition
from .topdown import TransitionMatrix

__all__ = [
    "LearnerState",
    "dictionary_direction",
    "transition_direction",
    "invariance_direction",
    "adam_step",
    "update_dictionary",
    "update_transition",
    "update_invariance",
]


@dataclass
class LearnerState:
    """Trainer hyperparameters, schedules and per-parameter buffers."""

    mode: str = "adam"
    psi: float = 0.01
    psi_transition: float = 0.01
    psi_invariance: float = 0.01
    theta0: float = 0.7
    theta_step: float = 0.1
    theta_every: int = 1000
    theta_max: float = 0.99
    noise0: float = 1e-4
    noise_decay: float = 0.999
    lr0: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    seed: int = 0
    epoch: int = 0
    batches: int = 0
    moments: dict = field(default_factory=dict, repr=False)
    previous: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.mode not in ("adam", "dual"):
            raise ValueError(f"unknown trainer mode {self.mode!r}")
        if min(self.psi, self.psi_transition, self.psi_invariance) <= 0:
            raise ValueError("step sizes must be positive")
        if not self.lr0 > 0:
            raise ValueError("learning rate must be positive")
        if not 0 <= self.theta0 < 1 or not 0 <= self.theta_max < 1:
            raise ValueError("forgetting factor must lie in [0, 1)")
        if self.noise0 < 0:
            raise ValueError("noise level must be non-negative")
        self.rng = np.random.default_rng(self.seed)

    @property
    def theta(self):
        """Forgetting factor, raised by ``theta_step`` every ``theta_every`` batches."""
        return min(self.theta_max, self.theta0 + self.theta_step * (self.batches // self.theta_every))

    @property
    def noise_std(self):
        return self.noise0 * self.noise_decay**self.batches

    @property
    def learning_rate(self):
        return self.lr0 * 0.5**self.epoch

    def end_batch(self):
        self.batches += 1

    def end_epoch(self):
        self.epoch += 1


def dictionary_direction(bank, target, states):
    """Correlation of the reconstruction residual with the states (minus the gradient)."""
    target = check_tensor4(target, "target")
    states = check_tensor4(states, "states")
    residual = target - _convolve(bank, states, "synth")
    return filter_correlation(residual, states, bank.size)


def transition_direction(weights, gamma_t, gamma_prev):
    """``sum sign(gamma_t - C gamma_prev) gamma_prev^T`` over batch and sites.

    Minus a subgradient of ``||gamma_t - C gamma_prev||_1`` in ``C``.
    """
    gamma_t = check_tensor4(gamma_t, "gamma_t")
    gamma_prev = check_tensor4(gamma_prev, "gamma_prev")
    if gamma_t.shape != gamma_prev.shape or gamma_t.shape[1] != weights.shape[0]:
        raise ShapeError("consecutive states and transition matrix disagree in shape")
    sign = np.sign(gamma_t - apply_transition(weights, gamma_prev))
    return np.einsum("nkyx,njyx->kj", sign, gamma_prev)


def invariance_direction(bank, kappa, gamma_abs):
    """Correlation of ``exp(-G kappa) * |gamma|`` with ``kappa``."""
    kappa = check_tensor4(kappa, "kappa")
    gamma_abs = check_tensor4(gamma_abs, "gamma_abs")
    weighted = _neg_exp(_convolve(bank, kappa, "synth")) * gamma_abs
    return filter_correlation(weighted, kappa, bank.size)


def adam_step(param, grad, ls, key="param"):
    """One bias-corrected ADAM step on ``param``; buffers live in ``ls.moments[key]``."""
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    m, v, t = ls.moments.get(key, (np.zeros_like(param), np.zeros_like(param), 0))
    if m.shape != param.shape:
        raise ShapeError(f"moment buffers for {key!r} have shape {m.shape}, parameter {param.shape}")
    t += 1
    m = ls.beta1 * m + (1 - ls.beta1) * grad
    v = ls.beta2 * v + (1 - ls.beta2) * grad * grad
    ls.moments[key] = (m, v, t)
    m_hat = m / (1 - ls.beta1**t)
    v_hat = v / (1 - ls.beta2**t)
    return param - ls.learning_rate * m_hat / (np.sqrt(v_hat) + ls.eps)


def _step(param, direction, psi, ls, key):
    if ls.mode == "adam":
        new = adam_step(param, -direction, ls, key)
    else:
        prev = ls.previous.get(key, param)
        noise = ls.rng.standard_normal(param.shape) * ls.noise_std if ls.noise_std else 0.0
        new = param + noise + psi * (direction + ls.theta * (param - prev))
    ls.previous[key] = np.array(param)
    if not np.all(np.isfinite(new)):
        raise DivergenceError(f"non-finite parameter update for {key}", ls.batches)
    return new


def _renormalize(filters, key):
    norms = np.sqrt(np.sum(filters**2, axis=(1, 2, 3)))
    if np.any(norms == 0):
        raise DivergenceError(f"a filter of {key} collapsed to zero")
    return FilterBank(filters / norms[:, None, None, None])


def update_dictionary(D, target, gamma, ls, key="D"):
    """Move the dictionary along the residual correlation, then renormalize."""
    direction = dictionary_direction(D, target, gamma)
    return _renormalize(_step(D.filters, direction, ls.psi, ls, key), key)


def update_transition(C, gamma_t, gamma_prev, ls, key="C"):
    """Sign-residual step on the transition matrix (not normalized)."""
    if C is None or gamma_prev is None:
        raise ModeError("transition updates need temporal mode")
    weights = C.weights if isinstance(C, TransitionMatrix) else np.asarray(C, dtype=np.float64)
    direction = transition_direction(weights, gamma_t, gamma_prev)
    return TransitionMatrix(_step(weights, direction, ls.psi_transition, ls, key))


def update_invariance(G, kappa, gamma_abs, ls, key="G"):
    """Move the invariance bank along the weighted cause correlation, then renormalize."""
    direction = invariance_direction(G, kappa, gamma_abs)
    return _renormalize(_step(G.filters, direction, ls.psi_invariance, ls, key), key)
