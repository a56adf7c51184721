"""Exception types raised across the package."""


class CalibError(Exception):
    """Base class for all package errors."""


class AngleNearPi(CalibError):
    """Rotation angle too close to pi for a well-defined logarithm."""


class NotPD(CalibError):
    """A covariance block failed the positive-definiteness check."""


class NotFactorizable(CalibError):
    """Cholesky factorization of a normal/KKT matrix failed."""


class BoxViolation(CalibError):
    """A parameter vector lies outside its box bounds."""


class MaxIterations(CalibError):
    """An iterative solver hit its iteration cap."""


class LineSearchExhausted(CalibError):
    """Armijo backtracking ran out of halvings."""


class IkOutOfRange(CalibError):
    """Requested foot position is outside the leg workspace."""


class LengthMismatch(CalibError):
    """Trajectory and ground truth do not have the same length."""


class SchemaVersionMismatch(CalibError):
    """File was written with an unsupported schema version."""


class MalformedRecord(CalibError):
    """A record in a log file could not be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
