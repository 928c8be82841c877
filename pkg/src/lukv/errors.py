"""Exception hierarchy. Each family maps to one CLI exit code."""


class LukvError(Exception):
    exit_code = 1


class ConfigError(LukvError, ValueError):
    """Bad user-supplied configuration (shape, metric spec, safeguards, CLI flags)."""

    exit_code = 2


class InvalidShapeError(ConfigError):
    pass


class MetricUnavailableError(ConfigError):
    """The trace lacks the tensor a metric needs."""


class ValidationError(LukvError, ValueError):
    """Input data violates a documented invariant."""

    exit_code = 3


class TraceLoadError(ValidationError):
    def __init__(self, message, tensor=None, index=None):
        super().__init__(message)
        self.tensor = tensor
        self.index = index


class MissingTensorFileError(TraceLoadError):
    pass


class SizeMismatchError(TraceLoadError):
    pass


class TraceValueError(TraceLoadError):
    """NaN, infinite or negative entry where the format forbids one."""


class InvalidCurveError(ValidationError):
    pass


class InvalidScoreError(ValidationError):
    pass


class InvariantViolation(ValidationError):
    pass


class InfeasibleBudgetError(LukvError, ValueError):
    exit_code = 4


class GuardrailError(ConfigError):
    """Instance too large for an exhaustive or DP reference solver."""
