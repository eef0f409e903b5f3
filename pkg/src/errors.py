"""
Exception hierarchy for the plane regression package.
Every error knows the process exit code the CLI reports for it.
"""


class PlaneRegressionError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 2


class GeometryError(PlaneRegressionError):
    """Invalid plane, transform or coordinate input."""


class DegenerateRotationError(PlaneRegressionError):
    """A raw rotation encoding cannot be turned into a rotation matrix."""


class ConfigError(PlaneRegressionError):
    """Invalid configuration value or flag combination."""

    exit_code = 1


class DataError(PlaneRegressionError):
    """Unreadable or inconsistent volume, manifest or fold data."""

    exit_code = 2


class NumericalFailure(PlaneRegressionError):
    """Training produced a non-finite loss."""

    exit_code = 3

    def __init__(self, message: str, snapshot_path: str = ""):
        super().__init__(message)
        self.snapshot_path = snapshot_path
