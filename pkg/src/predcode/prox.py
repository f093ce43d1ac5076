"""Generic accelerated proximal-gradient loop shared by the state and cause solvers."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np

from .exceptions import DivergenceError
from .ops import shrink
from .schedules import RestartPolicy

__all__ = ["SolverReport", "IterationInfo", "accelerated_prox_grad"]


class IterationInfo(NamedTuple):
    iteration: int
    point: np.ndarray  # extrapolated point where the gradient was taken
    pre_prox: np.ndarray  # point - step * grad, the shrink argument
    threshold: np.ndarray
    step: float
    beta: float  # momentum applied after this iteration
    cost: float
    restarted: bool


@dataclass
class SolverReport:
    iterations: int = 0
    cost_trace: list = field(default_factory=list)
    betas: list = field(default_factory=list)
    restarted: list = field(default_factory=list)
    restarts: int = 0
    final_sparsity: float = 0.0
    converged: bool = False
    lipschitz: float = float("nan")
    solution: Optional[np.ndarray] = None

    def write_trace(self, path):
        """CSV with columns ``iteration, cost, beta, restarted``."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "cost", "beta", "restarted"])
            writer.writerow([0, repr(self.cost_trace[0]), "", 0])
            for m, (cost, beta, flag) in enumerate(
                zip(self.cost_trace[1:], self.betas, self.restarted), start=1
            ):
                writer.writerow([m, repr(cost), repr(beta), int(flag)])


def accelerated_prox_grad(
    x0,
    grad: Callable,
    cost: Callable,
    weights,
    lipschitz: float,
    schedule,
    restart: RestartPolicy,
    max_iters: int,
    tol: float = 1e-8,
    window: int = 5,
    lipschitz_at: Optional[Callable] = None,
    callback: Optional[Callable] = None,
    forward: Optional[Callable] = None,
):
    """Minimize ``smooth(x) + sum(weights * |x|)`` by accelerated proximal gradients.

    ``grad`` and ``cost`` evaluate the smooth gradient and the full objective.
    The step is ``1 / lipschitz``; when a restart fires the step is retried
    from the last accepted iterate without momentum, and the Lipschitz bound
    is raised (``lipschitz_at`` refresh, then doubling) until the cost no
    longer increases.  Stops after ``max_iters`` or once the relative cost
    change over ``window`` iterations drops below ``tol``.

    When ``forward`` (a linear map) is given, ``grad`` and ``cost`` are
    called as ``f(x, forward(x))``.  The image of the extrapolated point is
    then formed from the images of the last two iterates, which saves one
    ``forward`` evaluation per iteration.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be at least 1")
    if not lipschitz > 0:
        raise ValueError("lipschitz must be positive")
    schedule.restart()
    x = np.array(x0, dtype=np.float64)
    if forward is None:
        image = lambda v: None  # noqa: E731
        call = lambda f, v, fv: f(v)  # noqa: E731
    else:
        image = forward
        call = lambda f, v, fv: f(v, fv)  # noqa: E731
    fx = image(x)
    point, f_point = x, fx
    current = float(call(cost, x, fx))
    if not np.isfinite(current):
        raise DivergenceError("non-finite cost at the starting point (iteration 0)", 0)
    report = SolverReport(cost_trace=[current], lipschitz=lipschitz)

    def prox_step(at, f_at, ell):
        step = 1.0 / ell
        pre = at - step * call(grad, at, f_at)
        thresh = step * weights
        new = shrink(pre, thresh)
        f_new = image(new)
        return new, f_new, float(call(cost, new, f_new)), pre, thresh, step

    ell = lipschitz
    for m in range(1, max_iters + 1):
        new, f_new, value, pre, thresh, step = prox_step(point, f_point, ell)
        restarted = False
        if restart.triggers(value, current) or (restart.enabled and not np.isfinite(value)):
            restarted = True
            report.restarts += 1
            schedule.restart()
            point, f_point = x, fx
            if lipschitz_at is not None:
                ell = max(ell, float(call(lipschitz_at, x, fx)))
            for _ in range(64):
                new, f_new, value, pre, thresh, step = prox_step(point, f_point, ell)
                if np.isfinite(value) and not restart.triggers(value, current):
                    break
                ell *= 2.0
        if not np.isfinite(value):
            raise DivergenceError(f"non-finite cost at iteration {m}", m)
        taken_at = point
        stalled = np.array_equal(new, x) and np.array_equal(point, x)
        x_prev, x = x, new
        fx_prev, fx = fx, f_new
        beta = schedule.next_beta()
        if beta:
            point = x + beta * (x - x_prev)
            f_point = None if forward is None else fx + beta * (fx - fx_prev)
        else:
            point, f_point = x, fx
        current = value
        report.cost_trace.append(value)
        report.betas.append(beta)
        report.restarted.append(restarted)
        if callback is not None:
            callback(IterationInfo(m, taken_at, pre, thresh, step, beta, value, restarted))
        report.iterations = m
        if stalled:
            report.converged = True
            break
        if m >= window:
            past = report.cost_trace[-1 - window]
            if abs(past - value) <= tol * max(abs(value), np.finfo(float).tiny):
                report.converged = True
                break
    report.lipschitz = ell
    report.solution = x
    report.final_sparsity = float(np.count_nonzero(x)) / x.size if x.size else 0.0
    return x, report
