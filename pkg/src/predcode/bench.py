"""Seeded dense LASSO problems, an exact reference solver, and schedule benchmarks.

Problems are ``0.5 * ||y - Phi x||^2 + sum(w * |x|)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .prox import accelerated_prox_grad
from .schedules import RestartPolicy, make_schedule

__all__ = [
    "LassoProblem",
    "make_rate_problem",
    "make_oscillation_problem",
    "lasso_reference",
    "run_schedules",
    "write_traces",
    "write_rates",
    "parse_schedule",
]


@dataclass(frozen=True)
class LassoProblem:
    phi: np.ndarray
    y: np.ndarray
    weights: np.ndarray

    @property
    def lipschitz(self):
        return float(np.linalg.norm(self.phi, 2) ** 2)

    def grad(self, x):
        return -self.phi.T @ (self.y - self.phi @ x)

    def cost(self, x):
        r = self.y - self.phi @ x
        return 0.5 * float(r @ r) + float(np.sum(self.weights * np.abs(x)))


def make_rate_problem(seed=0, rows=60, cols=120, decay=1.0, weight=1e-4):
    """Underdetermined problem with power-law singular values ``i^-decay``.

    Slowly decaying curvature keeps the accelerated gap polynomial over the
    first thousand iterations.
    """
    rng = np.random.default_rng(seed)
    u, _ = np.linalg.qr(rng.standard_normal((rows, rows)))
    v, _ = np.linalg.qr(rng.standard_normal((cols, rows)))
    sv = np.arange(1, rows + 1, dtype=np.float64) ** -decay
    phi = (u * sv) @ v.T
    x_true = np.zeros(cols)
    support = rng.choice(cols, cols // 4, replace=False)
    x_true[support] = rng.standard_normal(support.size)
    y = phi @ x_true + 0.01 * rng.standard_normal(rows)
    return LassoProblem(phi, y, np.full(cols, weight))


def make_oscillation_problem(seed=0, dim=20, condition=100.0, weight=1e-3):
    """Strongly convex problem whose accelerated iterates overshoot without restarts."""
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    sv = np.sqrt(np.geomspace(1.0, 1.0 / condition, dim))
    phi = (q * sv) @ q.T
    y = phi @ rng.standard_normal(dim)
    return LassoProblem(phi, y, np.full(dim, weight))


def lasso_reference(problem, tol=1e-12, max_sweeps=100000):
    """Coordinate descent followed by an exact solve on the detected support.

    Returns ``(x, cost, kkt_violation)``.  The polish step solves the
    optimality system ``Phi_S^T (y - Phi_S x_S) = w_S sign(x_S)`` directly
    and is kept only if it satisfies the optimality conditions at least as
    well as the coordinate-descent point.
    """
    phi, y, w = problem.phi, problem.y, problem.weights
    n = phi.shape[1]
    col_sq = np.einsum("ij,ij->j", phi, phi)
    x = np.zeros(n)
    r = y.copy()
    for _ in range(max_sweeps):
        delta = 0.0
        for j in range(n):
            if col_sq[j] == 0:
                continue
            old = x[j]
            rho = phi[:, j] @ r + col_sq[j] * old
            new = np.sign(rho) * max(abs(rho) - w[j], 0.0) / col_sq[j]
            if new != old:
                r -= phi[:, j] * (new - old)
                x[j] = new
                delta = max(delta, abs(new - old))
        if delta <= tol:
            break
    best = (x, kkt_violation(problem, x))
    support = np.flatnonzero(x)
    if support.size:
        sub = phi[:, support]
        rhs = sub.T @ y - w[support] * np.sign(x[support])
        xs, *_ = np.linalg.lstsq(sub.T @ sub, rhs, rcond=None)
        polished = np.zeros(n)
        polished[support] = xs
        if np.array_equal(np.sign(polished[support]), np.sign(x[support])):
            violation = kkt_violation(problem, polished)
            if violation <= best[1]:
                best = (polished, violation)
    return best[0], problem.cost(best[0]), best[1]


def kkt_violation(problem, x):
    """Largest violation of the subgradient optimality conditions."""
    g = problem.phi.T @ (problem.y - problem.phi @ x)
    w = problem.weights
    active = x != 0
    viol = np.where(active, np.abs(g - w * np.sign(x)), np.maximum(np.abs(g) - w, 0.0))
    return float(viol.max()) if viol.size else 0.0


def parse_schedule(text):
    """``"polynomial:3:3"``, ``"nesterov"`` or ``"plain"`` to a schedule."""
    parts = text.split(":")
    kind = parts[0]
    if kind == "polynomial":
        r = float(parts[1]) if len(parts) > 1 else 2.0
        d = float(parts[2]) if len(parts) > 2 else 3.0
        return make_schedule(kind, r, d)
    if len(parts) > 1:
        raise ValueError(f"schedule {kind!r} takes no parameters")
    return make_schedule(kind)


def run_schedules(problem, schedules, restart=None, max_iters=1000, tol=0.0):
    """Run every named schedule from ``x = 0``; returns ``{name: SolverReport}``."""
    restart = restart if restart is not None else RestartPolicy()
    out = {}
    n = problem.phi.shape[1]
    for name in schedules:
        _, report = accelerated_prox_grad(
            np.zeros(n),
            grad=problem.grad,
            cost=problem.cost,
            weights=problem.weights,
            lipschitz=problem.lipschitz,
            schedule=parse_schedule(name),
            restart=restart,
            max_iters=max_iters,
            tol=tol,
        )
        out[name] = report
    return out


def write_traces(reports, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "cost", "schedule"])
        for name, report in reports.items():
            for m, cost in enumerate(report.cost_trace):
                writer.writerow([m, repr(float(cost)), name])


def write_rates(rows, path):
    """Rows of ``(schedule, slope, iterations_to_gap)``."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["schedule", "slope", "iterations_to_gap"])
        for name, slope, hit in rows:
            writer.writerow([name, "" if slope is None else repr(float(slope)), "" if hit is None else hit])
