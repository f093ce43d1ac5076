"""Multi-stage predictive-coding network with a scikit-learn style interface."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .cause import CauseProblem, infer_causes, update_sparsity
from .exceptions import ConfigError, DivergenceError, ShapeError
from .learning import LearnerState, update_dictionary, update_invariance, update_transition
from .ops import FilterBank, PoolIndex, _convolve, cached_lipschitz, check_tensor4
from .prox import SolverReport
from .schedules import RestartPolicy, make_schedule
from .state import StateProblem, infer_states
from .topdown import TransitionMatrix, predict_topdown

__all__ = ["StageParameters", "StageResult", "PredictiveCodingNetwork", "as_images", "write_history"]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StageParameters:
    """Dictionary, invariance bank, optional transition matrix and weights of one stage."""

    D: FilterBank
    G: FilterBank
    C: Optional[TransitionMatrix] = None
    alpha: float = 1.0
    alpha_prime: float = 1.0
    state_lambda: float = 0.2
    lambda_prime: float = 0.2
    eta_prime: float = 0.1
    mu: float = 0.05

    def __post_init__(self):
        if self.G.in_channels != self.D.n_filters:
            raise ShapeError(
                f"invariance bank maps to {self.G.in_channels} channels, dictionary has {self.D.n_filters} states"
            )
        if self.C is not None and self.C.size != self.D.n_filters:
            raise ShapeError(f"transition matrix is {self.C.size}x{self.C.size}, expected {self.D.n_filters}")
        for name in ("alpha", "state_lambda", "alpha_prime", "mu"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.lambda_prime < 0 or self.eta_prime < 0:
            raise ValueError("lambda_prime and eta_prime must be non-negative")

    @property
    def in_channels(self):
        return self.D.in_channels

    @property
    def state_channels(self):
        return self.D.n_filters

    @property
    def cause_channels(self):
        return self.G.n_filters

    @property
    def filter_size(self):
        return self.D.size

    @classmethod
    def random(cls, in_channels, states, causes, size=5, invariance_size=3, temporal=False, rng=None, **weights):
        rng = np.random.default_rng(rng)
        D = FilterBank.random(states, in_channels, size, rng)
        # G weights |states|, so start it non-negative to give every cause an initial pull
        G = FilterBank(np.abs(FilterBank.random(causes, states, invariance_size, rng).filters))
        C = TransitionMatrix.identity(states) if temporal else None
        return cls(D=D, G=G, C=C, **weights)

    def arrays(self):
        out = {"D": self.D.filters, "G": self.G.filters}
        if self.C is not None:
            out["C"] = self.C.weights
        return out


@dataclass
class StageResult:
    input: np.ndarray
    states: np.ndarray  # unpooled
    pooled: np.ndarray
    pool_index: PoolIndex
    causes: np.ndarray
    sparsity: np.ndarray  # weights used for the last state inference
    reconstruction: np.ndarray
    state_report: SolverReport
    cause_report: SolverReport
    reports: List[tuple] = field(default_factory=list)  # (state, cause) reports of every pass

    @property
    def residual(self):
        return self.input - self.reconstruction


def as_images(X):
    """Accept ``(n, h, w)`` or ``(n, c, h, w)`` arrays and return the 4-D float form."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[:, None]
    return check_tensor4(X, "X")


def _per_stage(value, n, name):
    if np.ndim(value) == 0:
        return [float(value)] * n
    value = [float(v) for v in value]
    if len(value) < n:
        raise ConfigError(name, f"needs {n} entries, got {len(value)}")
    return value[:n]


class PredictiveCodingNetwork(TransformerMixin, BaseEstimator):
    """Hierarchical convolutional sparse coding with invariant causes.

    Each stage infers sparse states from its input, max-pools them, infers
    causes from the pooled states, and hands the causes to the next stage.
    ``transform`` returns the concatenated causes of every stage.

    Parameters
    ----------
    stages : sequence of (states, causes)
    filter_size, invariance_size : odd filter sizes of ``D`` and ``G``
    state_lambda, cause_lambda, alpha : per-stage weights (scalars broadcast)
    mode : ``"static"`` or ``"temporal"``; temporal treats consecutive
        ``forward_infer`` calls as consecutive time steps.
    """

    def __init__(
        self,
        stages=((32, 64), (64, 128)),
        filter_size=5,
        invariance_size=3,
        state_lambda=(0.2, 0.25, 0.35),
        cause_lambda=(0.2, 0.25, 0.35),
        alpha=(1.0, 1.0, 3.0),
        alpha_prime=1.0,
        eta_prime=0.1,
        mu=0.05,
        schedule="polynomial",
        schedule_r=2.0,
        schedule_d=3.0,
        restart="function_value",
        restart_tolerance=1e-12,
        state_iters=500,
        cause_iters=500,
        topdown_iters=2,
        mode="static",
        trainer="adam",
        learning_rate=1e-3,
        psi=0.01,
        inner_iters=1,
        batch_size=32,
        epochs=2,
        seed=0,
    ):
        self.stages = stages
        self.filter_size = filter_size
        self.invariance_size = invariance_size
        self.state_lambda = state_lambda
        self.cause_lambda = cause_lambda
        self.alpha = alpha
        self.alpha_prime = alpha_prime
        self.eta_prime = eta_prime
        self.mu = mu
        self.schedule = schedule
        self.schedule_r = schedule_r
        self.schedule_d = schedule_d
        self.restart = restart
        self.restart_tolerance = restart_tolerance
        self.state_iters = state_iters
        self.cause_iters = cause_iters
        self.topdown_iters = topdown_iters
        self.mode = mode
        self.trainer = trainer
        self.learning_rate = learning_rate
        self.psi = psi
        self.inner_iters = inner_iters
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed

    # -- configuration ------------------------------------------------------

    def _validate_params(self):
        stages = [tuple(int(v) for v in s) for s in self.stages]
        if not stages or any(len(s) != 2 or min(s) < 1 for s in stages):
            raise ConfigError("stages", "each stage needs positive (states, causes) counts")
        for key in ("filter_size", "invariance_size"):
            size = getattr(self, key)
            if size < 1 or size % 2 == 0:
                raise ConfigError(key, f"must be a positive odd integer, got {size}")
        for key in ("state_iters", "cause_iters", "topdown_iters", "batch_size", "inner_iters"):
            if int(getattr(self, key)) < 1:
                raise ConfigError(key, "must be at least 1")
        if int(self.epochs) < 0:
            raise ConfigError("epochs", "must be non-negative")
        if self.mode not in ("static", "temporal"):
            raise ConfigError("mode", f"unknown mode {self.mode!r}")
        if self.trainer not in ("adam", "dual"):
            raise ConfigError("trainer", f"unknown trainer {self.trainer!r}")
        try:
            make_schedule(self.schedule, self.schedule_r, self.schedule_d)
        except ValueError as exc:
            raise ConfigError("schedule", str(exc)) from None
        try:
            RestartPolicy(self.restart, self.restart_tolerance)
        except ValueError as exc:
            raise ConfigError("restart", str(exc)) from None
        return stages

    def _new_schedule(self):
        return make_schedule(self.schedule, self.schedule_r, self.schedule_d)

    def _restart_policy(self):
        return RestartPolicy(self.restart, self.restart_tolerance)

    def init_stages(self, in_channels, rng=None):
        """Random unit-norm parameters for every stage."""
        stages = self._validate_params()
        n = len(stages)
        lam = _per_stage(self.state_lambda, n, "state_lambda")
        lam_c = _per_stage(self.cause_lambda, n, "cause_lambda")
        alpha = _per_stage(self.alpha, n, "alpha")
        rng = np.random.default_rng(self.seed if rng is None else rng)
        out = []
        channels = in_channels
        for i, (states, causes) in enumerate(stages):
            out.append(
                StageParameters.random(
                    channels,
                    states,
                    causes,
                    self.filter_size,
                    self.invariance_size,
                    temporal=self.mode == "temporal",
                    rng=rng,
                    alpha=alpha[i],
                    alpha_prime=self.alpha_prime,
                    state_lambda=lam[i],
                    lambda_prime=lam_c[i],
                    eta_prime=self.eta_prime,
                    mu=self.mu,
                )
            )
            channels = causes
        return out

    def _check_stack(self, stages, x):
        if x.shape[1] != stages[0].in_channels:
            raise ShapeError(f"input has {x.shape[1]} channels, first stage expects {stages[0].in_channels}")
        h, w = x.shape[2:]
        for i, stage in enumerate(stages):
            if i and stage.in_channels != stages[i - 1].cause_channels:
                raise ShapeError(f"stage {i + 1} expects {stage.in_channels} inputs, stage {i} has {stages[i - 1].cause_channels} causes")
            if h % 2 or w % 2:
                raise ShapeError(f"stage {i + 1} input grid {(h, w)} cannot be pooled 2x2")
            h, w = h // 2, w // 2

    # -- inference ----------------------------------------------------------

    def forward_infer(self, batch, stages=None, previous=None):
        """Run bottom-up inference with ``topdown_iters`` top-down passes.

        ``previous`` (temporal mode) is the result list of the prior time
        step.  Returns one :class:`StageResult` per stage.
        """
        stages = self.stages_ if stages is None else stages
        x = as_images(batch)
        self._check_stack(stages, x)
        temporal = self.mode == "temporal" and previous is not None
        restart = self._restart_policy()
        n_stages = len(stages)
        fields = [None] * n_stages
        results: List[Optional[StageResult]] = [None] * n_stages

        for outer in range(int(self.topdown_iters)):
            topdown, interstage = self._topdown_targets(stages, results, previous, temporal, outer)
            stage_input = x
            for i, stage in enumerate(stages):
                prev = results[i]
                field_i = fields[i] if fields[i] is not None else 2.0 * stage.alpha_prime
                sparsity = stage.state_lambda * np.broadcast_to(
                    field_i, (stage_input.shape[0], stage.state_channels) + stage_input.shape[2:]
                )
                problem = StateProblem(
                    stage_input,
                    stage.D,
                    sparsity,
                    alpha=stage.alpha if temporal else 0.0,
                    transition=stage.C.weights if temporal else None,
                    prev_state=previous[i].states if temporal else None,
                    mu=stage.mu,
                )
                try:
                    pooled, idx, s_report = infer_states(
                        problem,
                        self._new_schedule(),
                        restart,
                        int(self.state_iters),
                        init=None if prev is None else prev.states,
                        lipschitz=cached_lipschitz(stage.D, *stage_input.shape[2:]),
                    )
                    cause_problem = CauseProblem(
                        pooled,
                        stage.G,
                        topdown=topdown[i],
                        alpha_prime=stage.alpha_prime,
                        lambda_prime=stage.lambda_prime,
                        eta_prime=stage.eta_prime,
                        interstage=interstage[i],
                        alpha=stage.alpha,
                    )
                    kappa, c_report = infer_causes(
                        cause_problem,
                        self._new_schedule(),
                        restart,
                        int(self.cause_iters),
                        init=None if prev is None else prev.causes,
                    )
                except DivergenceError as exc:
                    raise DivergenceError(f"stage {i + 1}, top-down pass {outer + 1}: {exc}", exc.iteration) from exc
                fields[i] = update_sparsity(stage.G, kappa, stage.alpha_prime, idx)
                reports = (prev.reports if prev is not None else []) + [(s_report, c_report)]
                results[i] = StageResult(
                    stage_input,
                    s_report.solution,
                    pooled,
                    idx,
                    kappa,
                    sparsity,
                    _convolve(stage.D, s_report.solution, "synth"),
                    s_report,
                    c_report,
                    reports,
                )
                stage_input = kappa
        return results

    def _topdown_targets(self, stages, results, previous, temporal, outer):
        n = len(stages)
        topdown = [None] * n
        interstage = [None] * n
        if temporal:
            for i in range(n - 1):
                above = stages[i + 1]
                topdown[i] = predict_topdown(
                    above, previous[i + 1].states, previous[i + 1].causes, previous[i + 1].pool_index
                )
            topdown[-1] = previous[-1].causes
        elif outer > 0:
            for i in range(n - 1):
                topdown[i] = interstage[i] = results[i + 1].reconstruction
            topdown[-1] = results[-1].causes
        return topdown, interstage

    # -- training -----------------------------------------------------------

    def fit(self, X, y=None):
        """Learn all stage parameters from images ``X`` (assumed whitened)."""
        X = as_images(X)
        self._validate_params()
        rng = np.random.default_rng(self.seed)
        self.stages_ = self.init_stages(X.shape[1], rng)
        self._check_stack(self.stages_, X)
        self.learner_ = LearnerState(mode=self.trainer, lr0=self.learning_rate, psi=self.psi,
                                     psi_transition=self.psi, psi_invariance=self.psi,
                                     seed=int(rng.integers(2**32)))
        self.history_ = []
        for epoch in range(int(self.epochs)):
            order = rng.permutation(X.shape[0])
            self.history_.extend(self._train_epoch(X, order, epoch))
            self.learner_.end_epoch()
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def _train_epoch(self, X, order, epoch):
        n_stages = len(self.stages_)
        energy = np.zeros(n_stages)
        sq = np.zeros(n_stages)
        count = np.zeros(n_stages)
        nonzero = np.zeros(n_stages)
        state_iters = np.zeros(n_stages)
        cause_iters = np.zeros(n_stages)
        batches = 0
        previous = None
        for start in range(0, len(order), int(self.batch_size)):
            batch = X[order[start : start + int(self.batch_size)]]
            try:
                results = self.forward_infer(batch, previous=previous)
            except DivergenceError as exc:
                raise DivergenceError(f"epoch {epoch + 1}, batch {batches + 1}: {exc}", exc.iteration) from exc
            for i, r in enumerate(results):
                res = r.residual
                energy[i] += np.sum(r.input**2)
                sq[i] += np.sum(res**2)
                count[i] += res.size
                nonzero[i] += np.count_nonzero(r.states) / r.states.size
                state_iters[i] += sum(s.iterations for s, _ in r.reports)
                cause_iters[i] += sum(c.iterations for _, c in r.reports)
            self._learn(results, previous)
            previous = results if self.mode == "temporal" else None
            self.learner_.end_batch()
            batches += 1
        rows = []
        for i in range(n_stages):
            rows.append(
                {
                    "epoch": epoch + 1,
                    "stage": i + 1,
                    "mse": float(sq[i] / count[i]),
                    "mse_percent": float(100.0 * sq[i] / energy[i]) if energy[i] > 0 else float("nan"),
                    "sparsity": float(nonzero[i] / batches),
                    "state_iters": float(state_iters[i] / batches),
                    "cause_iters": float(cause_iters[i] / batches),
                }
            )
            log.info("epoch %d stage %d mse %.6g sparsity %.4f", epoch + 1, i + 1, rows[-1]["mse"], rows[-1]["sparsity"])
        return rows

    def _learn(self, results, previous):
        ls = self.learner_
        new = []
        for i, (stage, r) in enumerate(zip(self.stages_, results)):
            D, G, C = stage.D, stage.G, stage.C
            for _ in range(int(self.inner_iters)):
                D = update_dictionary(D, r.input, r.states, ls, key=f"D{i}")
                G = update_invariance(G, r.causes, np.abs(r.pooled), ls, key=f"G{i}")
                if C is not None and previous is not None:
                    C = update_transition(C, r.states, previous[i].states, ls, key=f"C{i}")
            new.append(replace(stage, D=D, G=G, C=C))
        self.stages_ = new

    # -- features -----------------------------------------------------------

    def transform_stages(self, X):
        """Per-stage cause features, each flattened to ``(n, d_i * h_i * w_i)``."""
        check_is_fitted(self, "stages_")
        X = as_images(X)
        per_stage = [[] for _ in self.stages_]
        previous = None
        for start in range(0, X.shape[0], int(self.batch_size)):
            results = self.forward_infer(X[start : start + int(self.batch_size)], previous=previous)
            previous = results if self.mode == "temporal" else None
            for i, r in enumerate(results):
                per_stage[i].append(r.causes.reshape(r.causes.shape[0], -1))
        return [np.concatenate(chunks) for chunks in per_stage]

    def transform(self, X):
        """Concatenated causes of all stages."""
        return np.concatenate(self.transform_stages(X), axis=1)

    @classmethod
    def from_stages(cls, stages, **params):
        """Network wrapping already-built stage parameters (no training)."""
        net = cls(stages=tuple((s.state_channels, s.cause_channels) for s in stages), **params)
        net.stages_ = list(stages)
        net.history_ = []
        net.n_features_in_ = None
        return net


def write_history(history, path):
    """Per-epoch metrics as CSV; floats are written with ``repr`` for exact reruns."""
    columns = ["epoch", "stage", "mse", "mse_percent", "sparsity", "state_iters", "cause_iters"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in history:
            writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in columns])
