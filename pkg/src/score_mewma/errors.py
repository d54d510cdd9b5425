"""Exception types shared across the package.

The CLI maps these onto stable exit codes, so new error conditions should
reuse one of the classes below rather than raising bare ValueErrors.
"""


class ScoreMewmaError(Exception):
    """Base class for all errors raised by this package."""


class ModelConfigError(ScoreMewmaError):
    """Invalid model configuration: syntax, structure, or value errors."""


class DataFormatError(ScoreMewmaError):
    """Malformed patient data (CSV rows, missing columns, bad values)."""


class FitError(ScoreMewmaError):
    """Maximum-likelihood fitting failed to converge."""


class SeparationError(FitError):
    """Complete or quasi-complete separation detected while fitting."""


class SingularMatrixError(ScoreMewmaError):
    """A matrix that must be invertible is numerically singular."""


class CalibrationError(ScoreMewmaError):
    """Control-limit calibration failed (bad target or no bracket)."""


class ShiftError(ScoreMewmaError):
    """Invalid shift specification for the given model."""
