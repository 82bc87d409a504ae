class PrcnnError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(PrcnnError, ValueError):
    pass


class ArgumentError(PrcnnError, ValueError):
    pass


class ConsistencyError(PrcnnError):
    """A cache or trace does not belong to the values handed to a backward pass."""


class StructuralError(PrcnnError, ValueError):
    """Parameter and gradient records do not line up."""


class DatasetError(PrcnnError):
    pass


class UnsupportedFormatError(PrcnnError):
    pass


class ParseError(PrcnnError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CorruptionError(PrcnnError):
    pass


class VersionError(PrcnnError):
    pass
