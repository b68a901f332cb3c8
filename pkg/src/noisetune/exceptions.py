"""Exception hierarchy shared across the package."""


class NoiseTuneError(Exception):
    """Base class for all package errors."""


class DimensionError(NoiseTuneError, ValueError):
    """Operand shapes are incompatible."""


class DegenerateInputError(NoiseTuneError, ValueError):
    """Input is numerically degenerate (e.g. a zero-norm vector)."""


class ParameterError(NoiseTuneError, ValueError):
    """An argument is outside its valid range."""


class ConfigError(NoiseTuneError, ValueError):
    """A configuration is invalid or inconsistent."""


class DomainError(NoiseTuneError, ValueError):
    """A value lies outside the mathematical domain of a function."""


class UsageError(NoiseTuneError, RuntimeError):
    """An API was called in an unsupported way."""


class NonFiniteError(NoiseTuneError, FloatingPointError):
    """A forward operation produced NaN or Inf."""


class AdaptationError(NoiseTuneError, RuntimeError):
    """Noise adaptation failed at a given step.

    Carries the failing step index and the trace recorded before the failure.
    """

    def __init__(self, message, step, trace):
        super().__init__(message)
        self.step = step
        self.trace = trace
