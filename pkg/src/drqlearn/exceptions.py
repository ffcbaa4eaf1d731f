"""Exception hierarchy shared across the package."""


class DRQError(Exception):
    """Base class for all package errors."""


class ParameterError(DRQError, ValueError):
    """An argument is outside its admissible range."""


class PositivityError(DRQError, ValueError):
    """A density ratio is undefined because a denominator vanishes."""

    def __init__(self, message, where=None):
        super().__init__(message)
        self.where = where


class NumericError(DRQError, ArithmeticError):
    """A linear solve failed or produced unusable values."""


class DataError(DRQError, ValueError):
    """A dataset violates a structural requirement."""


class MetricError(DRQError, ValueError):
    """A metric is undefined for the given inputs."""
