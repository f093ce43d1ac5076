"""Exception types raised across the package."""


class ShapeError(ValueError):
    """Array dimensions are inconsistent with the operation."""


class DegenerateError(ValueError):
    """An operator or input has no usable magnitude (e.g. an all-zero bank)."""


class DivergenceError(FloatingPointError):
    """An iterative procedure produced a non-finite value."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class ModeError(RuntimeError):
    """Operation requested in the wrong mode (static vs. temporal)."""


class CorruptionError(ValueError):
    """Stored indices or metadata are internally inconsistent."""


class FormatError(ValueError):
    """A file does not follow the expected binary or text layout."""


class ConfigError(ValueError):
    """Invalid configuration value; ``key`` names the offending entry."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key
