"""Hierarchical convolutional predictive coding with accelerated proximal inference."""

from .cause import CauseProblem, cause_cost, cause_grad, infer_causes, update_sparsity
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, ZCAWhitener, load_idx, synth_bars, write_idx, zca_whiten
from .exceptions import (
    ConfigError,
    CorruptionError,
    DegenerateError,
    DivergenceError,
    FormatError,
    ModeError,
    ShapeError,
)
from .network import PredictiveCodingNetwork, StageParameters
from .ops import (
    FilterBank,
    PoolIndex,
    conv_analyze,
    conv_synthesize,
    estimate_lipschitz,
    max_pool,
    max_unpool,
    proj_linf,
    shrink,
)
from .schedules import NesterovSchedule, PlainSchedule, PolynomialSchedule, RestartPolicy, step_size
from .state import StateProblem, infer_states, smoothed_transition_grad, state_cost
from .topdown import TransitionMatrix, predict_topdown

__version__ = "0.1.0"
