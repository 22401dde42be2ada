"""Exception hierarchy shared by every chanform module."""


class ChanformError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(ChanformError, ValueError):
    """Input failed a documented precondition."""


class PlacementError(ChanformError):
    """Random placement gave up after the retry budget."""


class GridTooLargeError(ChanformError):
    """Requested raster or voxel grid exceeds the configured cell cap."""


class OutOfBoundsError(ChanformError):
    """A link endpoint lies outside the environment."""


class DegenerateLinkError(ChanformError):
    """TX and RX coincide."""


class InvalidEndpointError(ChanformError):
    """A link endpoint sits inside an occupied voxel."""


class NoPathError(ChanformError):
    """No propagation path is available for the requested computation."""


class MissingModalityError(ChanformError):
    """A feature group needs an input (e.g. voxels) that was not supplied."""


class SchemaMismatchError(ChanformError):
    """Model and dataset were built against different feature schemas."""


class StaleCacheError(ChanformError):
    """Backward pass called with a cache from another forward/model."""


class DivergenceError(ChanformError):
    """Training produced a non-finite loss."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
