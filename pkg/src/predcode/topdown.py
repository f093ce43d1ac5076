"""Closed-form top-down prediction of lower-stage causes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cause import update_sparsity
from .exceptions import ModeError, ShapeError
from .ops import _convolve, check_tensor4
from .state import apply_transition

__all__ = ["TransitionMatrix", "topdown_states", "topdown_objective", "predict_topdown"]


@dataclass(frozen=True)
class TransitionMatrix:
    """Channel mixing ``k x k`` applied identically at every spatial site."""

    weights: np.ndarray

    def __post_init__(self):
        weights = np.array(self.weights, dtype=np.float64)
        if weights.ndim != 2 or weights.shape[0] != weights.shape[1]:
            raise ShapeError(f"transition matrix must be square, got {weights.shape}")
        if not np.all(np.isfinite(weights)):
            raise ValueError("transition matrix contains non-finite values")
        weights.setflags(write=False)
        object.__setattr__(self, "weights", weights)

    @property
    def size(self):
        return self.weights.shape[0]

    @classmethod
    def identity(cls, size):
        return cls(np.eye(size))

    def apply(self, states):
        return apply_transition(self.weights, states)


def topdown_states(anchor, weighted_sparsity, alpha):
    """Per-coordinate minimizer: keep ``anchor`` where ``weighted_sparsity < alpha``, else 0."""
    anchor = np.asarray(anchor, dtype=np.float64)
    return np.where(np.asarray(weighted_sparsity) < alpha, anchor, 0.0)


def topdown_objective(gamma, anchor, weighted_sparsity, alpha):
    """Elementwise ``alpha * |gamma - anchor| + weighted_sparsity * |gamma|``.

    Returned unsummed so each coordinate can be compared on its own.  An
    infinite ``alpha`` contributes nothing where ``gamma == anchor``.
    """
    gap = np.abs(np.asarray(gamma) - anchor)
    transition = np.where(gap == 0, 0.0, alpha * np.where(gap == 0, 1.0, gap))
    return transition + np.asarray(weighted_sparsity) * np.abs(gamma)


def predict_topdown(stage, gamma_prev, kappa, idx):
    """Predicted causes of the stage below from this stage's previous states and causes.

    ``stage`` needs ``D``, ``C``, ``G``, ``alpha`` and ``alpha_prime``;
    ``gamma_prev`` holds the unpooled states of the previous time step and
    ``idx`` the pooling index that maps causes back to state resolution.
    """
    if stage.C is None or gamma_prev is None:
        raise ModeError("top-down prediction needs a transition matrix and previous states")
    gamma_prev = check_tensor4(gamma_prev, "gamma_prev")
    weights = stage.C.weights if isinstance(stage.C, TransitionMatrix) else np.asarray(stage.C)
    if gamma_prev.shape[1] != weights.shape[0] or weights.shape[0] != stage.D.n_filters:
        raise ShapeError("previous states, transition matrix and dictionary disagree on state count")
    sparsity = update_sparsity(stage.G, kappa, stage.alpha_prime, idx)
    gamma = topdown_states(apply_transition(weights, gamma_prev), stage.alpha_prime * sparsity, stage.alpha)
    return _convolve(stage.D, gamma, "synth")
