"""Inertial sequences, constant step sizes and the in-place restart rule."""

from __future__ import annotations

import math
from dataclasses import dataclass

__all__ = [
    "InertialSchedule",
    "PolynomialSchedule",
    "NesterovSchedule",
    "PlainSchedule",
    "RestartPolicy",
    "make_schedule",
    "step_size",
]


class InertialSchedule:
    """Generator of momentum weights ``beta_m = (k_m - 1) / k_{m+1}``.

    Subclasses define ``_k(m)`` for the sequence ``k_1, k_2, ...``.  The
    counter ``m`` starts at 1; :meth:`next_beta` returns ``beta_m`` and
    advances the counter.
    """

    kind = "abstract"

    def __init__(self):
        self.restart()

    def restart(self):
        """Forget all momentum: the next beta is ``beta_1 = 0``."""
        self.m = 1
        self.k_curr = self._first_k()
        self.k_prev = None

    def next_beta(self):
        k_next = self._advance(self.k_curr, self.m)
        beta = (self.k_curr - 1.0) / k_next
        self.k_prev, self.k_curr = self.k_curr, k_next
        self.m += 1
        return beta

    def peek(self, count):
        """First ``count`` betas of a fresh copy; does not touch this instance."""
        fresh = self.copy()
        fresh.restart()
        return [fresh.next_beta() for _ in range(count)]

    def _first_k(self):
        return 1.0

    def _advance(self, k, m):
        raise NotImplementedError

    def copy(self):
        raise NotImplementedError

    def params(self):
        return {"kind": self.kind}


class PolynomialSchedule(InertialSchedule):
    """``k_m = 1 + (m^r - 1) / d`` with ``r > 1`` and ``d > 0``."""

    kind = "polynomial"

    def __init__(self, r=2.0, d=3.0):
        if not r > 1:
            raise ValueError(f"polynomial schedule needs r > 1, got {r}")
        if not d > 0:
            raise ValueError(f"polynomial schedule needs d > 0, got {d}")
        self.r = float(r)
        self.d = float(d)
        super().__init__()

    def _advance(self, k, m):
        return 1.0 + ((m + 1) ** self.r - 1.0) / self.d

    def copy(self):
        return PolynomialSchedule(self.r, self.d)

    def params(self):
        return {"kind": self.kind, "r": self.r, "d": self.d}

    def __repr__(self):
        return f"PolynomialSchedule(r={self.r:g}, d={self.d:g})"


class NesterovSchedule(InertialSchedule):
    """``k_1 = 1``, ``k_{m+1} = (1 + sqrt(1 + 4 k_m^2)) / 2``."""

    kind = "nesterov"

    def _advance(self, k, m):
        return 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * k * k))

    def copy(self):
        return NesterovSchedule()

    def __repr__(self):
        return "NesterovSchedule()"


class PlainSchedule(InertialSchedule):
    """``beta_m = 0`` for every ``m``: the unaccelerated proximal gradient."""

    kind = "plain"

    def _advance(self, k, m):
        return 1.0

    def copy(self):
        return PlainSchedule()

    def __repr__(self):
        return "PlainSchedule()"


def make_schedule(kind="polynomial", r=2.0, d=3.0):
    """Build a schedule from its config name."""
    if kind == "polynomial":
        return PolynomialSchedule(r, d)
    if kind == "nesterov":
        return NesterovSchedule()
    if kind == "plain":
        return PlainSchedule()
    raise ValueError(f"unknown schedule kind {kind!r}")


@dataclass(frozen=True)
class RestartPolicy:
    """Function-value restart rule.

    With ``mode="function_value"`` a step is rejected when the cost rises by
    more than ``tolerance * (1 + |previous cost|)``; the solver then clears
    momentum and continues from its last accepted iterate.
    """

    mode: str = "function_value"
    tolerance: float = 1e-12

    def __post_init__(self):
        if self.mode not in ("none", "function_value"):
            raise ValueError(f"unknown restart mode {self.mode!r}")
        if self.tolerance < 0:
            raise ValueError("restart tolerance must be non-negative")

    @property
    def enabled(self):
        return self.mode == "function_value"

    def triggers(self, cost, previous):
        return self.enabled and cost > previous + self.tolerance * (1.0 + abs(previous))


def step_size(lipschitz, safety=1.0):
    """Constant step ``safety / lipschitz``."""
    if not lipschitz > 0:
        raise ValueError(f"Lipschitz constant must be positive, got {lipschitz}")
    if not 0 < safety <= 1:
        raise ValueError(f"safety factor must lie in (0, 1], got {safety}")
    return safety / lipschitz
