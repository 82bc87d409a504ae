"""Parallel CNN + bidirectional GRU music genre classifier, implemented in numpy."""

from prcnn.errors import (
    ArgumentError,
    ConsistencyError,
    CorruptionError,
    DatasetError,
    DimensionError,
    ParseError,
    PrcnnError,
    StructuralError,
    UnsupportedFormatError,
    VersionError,
)

__version__ = "0.1.0"

__all__ = [
    "ArgumentError",
    "ConsistencyError",
    "CorruptionError",
    "DatasetError",
    "DimensionError",
    "ParseError",
    "PrcnnError",
    "StructuralError",
    "UnsupportedFormatError",
    "VersionError",
]
