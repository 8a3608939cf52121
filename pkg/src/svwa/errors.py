"""Exception hierarchy shared by every module of the package."""


class SVWAError(Exception):
    """Base class for all errors raised by :mod:`svwa`."""


class DimensionError(SVWAError, ValueError):
    """Array shapes do not conform."""


class DegenerateBatchError(SVWAError, ValueError):
    """Batch statistics are undefined (fewer than two samples per channel)."""


class NumericError(SVWAError, FloatingPointError):
    """A NaN/Inf input or a non-positive variance was encountered."""


class LabelError(SVWAError, ValueError):
    """Class label outside ``[0, num_classes)``."""


class StructureError(SVWAError, ValueError):
    """Two parameter sets do not share names, order and shapes."""


class SizeError(SVWAError, ValueError):
    """Requested more samples than a point cloud holds."""


class FormatError(SVWAError, ValueError):
    """A binary file is corrupt or truncated.

    ``offset`` is the byte position at which decoding failed.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class VersionError(FormatError):
    """A binary file carries an unsupported format version."""


class ConfigError(SVWAError, ValueError):
    """An experiment configuration is invalid."""
