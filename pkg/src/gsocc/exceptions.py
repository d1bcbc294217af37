"""Exception types raised across the package."""


class GsoccError(Exception):
    """Base class for all package errors."""

    code = "error"


class InvalidGaussianError(GsoccError, ValueError):
    code = "invalid-gaussian"


class InvalidParameterError(GsoccError, ValueError):
    code = "invalid-parameter"


class InvalidInputError(GsoccError, ValueError):
    code = "invalid-input"


class NumericInputError(GsoccError, ValueError):
    """Raised when an operation receives or produces non-finite values."""

    code = "numeric"


class EmptyContextError(GsoccError, ValueError):
    code = "empty-context"


class InvalidTapeError(GsoccError, ValueError):
    code = "invalid-tape"


class DegenerateSceneError(GsoccError, ValueError):
    code = "degenerate-scene"
