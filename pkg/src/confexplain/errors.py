"""Exception types shared across the package."""


class ConfexplainError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(ConfexplainError):
    """A CSV cell could not be parsed; carries the offending row and column."""

    def __init__(self, row, column, message):
        self.row = row
        self.column = column
        super().__init__(f"row {row}, column {column!r}: {message}")


class SchemaMismatch(ConfexplainError):
    pass


class ClassMissingInTrain(ConfexplainError):
    pass


class DimensionMismatch(ConfexplainError):
    pass


class TooManyFeatures(ConfexplainError):
    pass


class KTooLarge(ConfexplainError):
    pass


class DegenerateMedian(ConfexplainError):
    pass


class ClassTooSmall(ConfexplainError):
    pass


class CalibrationTooSmall(ConfexplainError):
    pass


class NotCalibrated(ConfexplainError):
    pass


class UnsupportedK(ConfexplainError):
    pass


class NonFiniteLoss(ConfexplainError):
    pass


class ConfigError(ConfexplainError):
    pass
