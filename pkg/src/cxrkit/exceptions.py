"""Exception types shared across the package."""


class CxrkitError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(CxrkitError, ValueError):
    """An array argument has the wrong shape, rank, or an inconsistent size."""


class NumericsError(CxrkitError, ArithmeticError):
    """A numeric precondition failed: non-finite values where finite ones are required."""


class ConfigError(CxrkitError, ValueError):
    """A configuration value is out of range or internally inconsistent."""


class DegenerateImageError(CxrkitError, ValueError):
    """An image has no usable intensity spread (constant, or all mass in one bin)."""


class DegenerateClassError(CxrkitError, ValueError):
    """A class has no positives or no negatives among the samples where it is active.

    Carries the offending class indices in ``class_indices``.
    """

    def __init__(self, message, class_indices=()):
        super().__init__(message)
        self.class_indices = tuple(class_indices)


class UndefinedMetricError(CxrkitError, ValueError):
    """A metric is undefined for the given inputs (e.g. single-class labels)."""


class IngestError(CxrkitError, ValueError):
    """A manifest, annotation file, or image file failed validation on load.

    ``row`` is the 1-based data row that failed, 0 for header problems, or
    None when no row applies.
    """

    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class CheckpointError(CxrkitError, ValueError):
    """A checkpoint file is malformed, truncated, or version-incompatible."""
