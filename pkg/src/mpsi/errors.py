"""Exception hierarchy shared by all engine modules."""


class MPSIError(Exception):
    """Base class for every error raised by the engine."""


class ShapeError(MPSIError, ValueError):
    pass


class FormatError(MPSIError, ValueError):
    pass


class TruncationError(FormatError):
    pass


class DataError(MPSIError, ValueError):
    pass


class InfeasibleError(MPSIError, RuntimeError):
    pass


class DegenerateError(MPSIError, ValueError):
    """A direction or mask collapsed to zero where a nonzero one is required."""


class EvaluationError(MPSIError, FloatingPointError):
    pass


class DivergenceError(MPSIError, FloatingPointError):
    pass


class ConfigError(MPSIError, ValueError):
    pass


class UsageError(MPSIError, RuntimeError):
    pass
