"""Truncated-FOV cone-beam CT reconstruction with a coarse-grid prior."""

import os as _os

import numba as _numba

# old system TBB builds emit a warning on every first parallel launch
if "NUMBA_THREADING_LAYER" not in _os.environ:
    _numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

from .errors import (BadMagicError, ConfigError, DivergenceError, FormatError,
                     GeometryMismatchError, TcbctError, TruncatedPayloadError, VersionMismatchError)
from .geometry import Ray, ScanGeometry, VolumeGrid
from .projector import ProjectionStack, Volume

__version__ = "0.1.0"

__all__ = [
    "BadMagicError", "ConfigError", "DivergenceError", "FormatError", "GeometryMismatchError",
    "ProjectionStack", "Ray", "ScanGeometry", "TcbctError", "TruncatedPayloadError",
    "VersionMismatchError", "Volume", "VolumeGrid",
]
