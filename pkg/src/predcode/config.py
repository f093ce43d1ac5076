"""Flat ``key = value`` run configuration."""

from __future__ import annotations

from dataclasses import dataclass, field

from .exceptions import ConfigError

__all__ = ["RunConfig", "parse_config", "load_config", "parse_stages", "KEYS"]


def parse_stages(text):
    """``"32:64, 64:128"`` to ``((32, 64), (64, 128))``."""
    stages = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        parts = item.split(":")
        if len(parts) != 2:
            raise ValueError(f"stage {item!r} must look like states:causes")
        stages.append((int(parts[0]), int(parts[1])))
    if not stages:
        raise ValueError("no stages given")
    return tuple(stages)


def _floats(text):
    values = tuple(float(v) for v in text.split(",") if v.strip())
    if not values:
        raise ValueError("empty list")
    return values if len(values) > 1 else values[0]


def _restart_mode(text):
    mode = text.strip().lower().replace("-", "_")
    aliases = {"none": "none", "off": "none", "function_value": "function_value", "functionvalue": "function_value"}
    if mode not in aliases:
        raise ValueError(f"unknown restart mode {text!r}")
    return aliases[mode]


def _choice(*options):
    def parse(text):
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text

    return parse


# config key -> (destination, parser); destinations prefixed "run." are not estimator params
KEYS = {
    "stages": ("stages", parse_stages),
    "filter_size": ("filter_size", int),
    "invariance_size": ("invariance_size", int),
    "state.lambda": ("state_lambda", _floats),
    "cause.lambda": ("cause_lambda", _floats),
    "alpha": ("alpha", _floats),
    "alpha_prime": ("alpha_prime", float),
    "eta_prime": ("eta_prime", float),
    "mu": ("mu", float),
    "schedule.kind": ("schedule", _choice("polynomial", "nesterov", "plain")),
    "schedule.r": ("schedule_r", float),
    "schedule.d": ("schedule_d", float),
    "restart.mode": ("restart", _restart_mode),
    "restart.tolerance": ("restart_tolerance", float),
    "iters.state": ("state_iters", int),
    "iters.cause": ("cause_iters", int),
    "topdown.iters": ("topdown_iters", int),
    "mode": ("mode", _choice("static", "temporal")),
    "trainer.mode": ("trainer", _choice("adam", "dual")),
    "trainer.lr": ("learning_rate", float),
    "trainer.psi": ("psi", float),
    "trainer.inner_iters": ("inner_iters", int),
    "batch_size": ("batch_size", int),
    "epochs": ("epochs", int),
    "seed": ("seed", int),
    "whiten.eps": ("run.whiten_eps", float),
    "data.train_limit": ("run.train_limit", int),
    "data.test_limit": ("run.test_limit", int),
    "knn.k": ("run.knn_k", int),
}


@dataclass
class RunConfig:
    network: dict = field(default_factory=dict)
    whiten_eps: float = 1e-5
    train_limit: int = None
    test_limit: int = None
    knn_k: int = 7

    def set(self, key, value):
        if key not in KEYS:
            raise ConfigError(key, "unknown configuration key")
        dest, parse = KEYS[key]
        try:
            parsed = parse(value) if isinstance(value, str) else value
        except ValueError as exc:
            raise ConfigError(key, str(exc)) from None
        if dest.startswith("run."):
            setattr(self, dest[4:], parsed)
        else:
            self.network[dest] = parsed

    def validate(self):
        from .network import PredictiveCodingNetwork

        if not self.whiten_eps > 0:
            raise ConfigError("whiten.eps", "must be positive")
        if self.knn_k < 1:
            raise ConfigError("knn.k", "must be at least 1")
        for key in ("train_limit", "test_limit"):
            value = getattr(self, key)
            if value is not None and value < 1:
                raise ConfigError(f"data.{key}", "must be at least 1")
        PredictiveCodingNetwork(**self.network)._validate_params()
        return self


def parse_config(text):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    cfg = RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        cfg.set(key, value)
    return cfg.validate()


def load_config(path):
    with open(path) as fh:
        return parse_config(fh.read())
