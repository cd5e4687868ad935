"""Exception hierarchy shared by all stages.

``ValidationError`` subclasses signal bad inputs or parameters detected
before any work is done; the CLI maps them to exit status 2. Everything
else derived from ``PerfmapError`` is a runtime failure (exit status 1).
"""


class PerfmapError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(PerfmapError):
    """Inputs or parameters violate a precondition."""


class ParameterError(ValidationError):
    pass


class GeometryError(ValidationError):
    """Two volumes do not share a voxel grid."""


class NiftiFormatError(PerfmapError):
    pass


class UnsupportedShapeError(PerfmapError):
    pass


class DataError(PerfmapError):
    """Image data contains values the pipeline cannot use (NaN/Inf)."""


class DegenerateInputError(PerfmapError):
    pass


class EmptySelectionError(PerfmapError):
    """A thresholding step selected no voxels."""


class StageError(PerfmapError):
    """Wraps a failure inside one pipeline stage."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
