"""Exception hierarchy shared by every module."""


class ReconLabError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(ReconLabError, ValueError):
    """A parameter or configuration value is out of its valid range."""


class DomainMismatchError(ReconLabError, ValueError):
    """A lattice carries the wrong domain tag for the requested operation."""


class DimensionError(ReconLabError, ValueError):
    """Array shapes or channel counts do not agree."""


class InsufficientSamplesError(ReconLabError, ValueError):
    pass


class NotPositiveDefiniteError(ReconLabError, ValueError):
    pass


class CalibrationError(ReconLabError, ValueError):
    """The calibration region is too small for the kernel geometry."""


class SolverError(ReconLabError, ArithmeticError):
    pass


class UnsupportedOperationError(ReconLabError, TypeError):
    pass


class UndefinedMetricError(ReconLabError, ValueError):
    pass


class ContainerFormatError(ReconLabError, ValueError):
    """A file on disk violates the container/sidecar schema."""
