"""Shared exception types."""


class FormatError(ValueError):
    """A file or record does not match its documented format."""


class ArgumentError(ValueError):
    """An argument violates a documented precondition."""


class CalibrationError(ValueError):
    """Calibration is impossible for the requested confidence level."""


class TrainingError(RuntimeError):
    """Training diverged or was otherwise unable to proceed."""


class SearchError(RuntimeError):
    """An iterative search failed to terminate within its budget."""


class SolverError(RuntimeError):
    """An optimization backend failed in an unexpected way."""
