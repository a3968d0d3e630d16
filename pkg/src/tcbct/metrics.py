"""Region-of-interest error metrics between volumes on the same grid."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, GeometryMismatchError
from .geometry import VolumeGrid
from .projector import Volume


@dataclass(frozen=True)
class CylinderRoi:
    """Upright cylinder: voxel centers within ``radius`` of ``center_xy`` and z in range."""

    center_xy: tuple[float, float]
    radius: float
    z_min: float
    z_max: float


@dataclass(frozen=True)
class BoxRoi:
    """Axis-aligned box in mm (closed)."""

    lo: tuple[float, float, float]
    hi: tuple[float, float, float]


def interior_roi(omega: VolumeGrid, fraction: float = 0.8) -> CylinderRoi:
    """Cylinder over the central ``fraction`` of the fine box (radius and height)."""
    lo, hi = omega.bbox_min, omega.bbox_max
    cx, cy, cz = ((lo[a] + hi[a]) / 2 for a in range(3))
    radius = fraction * min(hi[0] - lo[0], hi[1] - lo[1]) / 2
    half_z = fraction * (hi[2] - lo[2]) / 2
    return CylinderRoi((cx, cy), radius, cz - half_z, cz + half_z)


def roi_mask(grid: VolumeGrid, roi=None) -> np.ndarray:
    """Boolean mask over ``grid`` for ``roi`` = None (all), a box (VolumeGrid or BoxRoi), or a CylinderRoi."""
    if roi is None:
        mask = np.ones(grid.shape, dtype=bool)
    else:
        x, y, z = grid.center_coords()
        if isinstance(roi, (VolumeGrid, BoxRoi)):
            lo, hi = (roi.bbox_min, roi.bbox_max) if isinstance(roi, VolumeGrid) else (roi.lo, roi.hi)
            mask = ((x >= lo[0]) & (x <= hi[0]) & (y >= lo[1]) & (y <= hi[1])
                    & (z >= lo[2]) & (z <= hi[2]))
        elif isinstance(roi, CylinderRoi):
            r2 = (x - roi.center_xy[0]) ** 2 + (y - roi.center_xy[1]) ** 2
            mask = (r2 <= roi.radius ** 2) & (z >= roi.z_min) & (z <= roi.z_max)
        else:
            raise ConfigError(f"unsupported roi {roi!r}")
        mask = np.broadcast_to(mask, grid.shape)
    if not mask.any():
        raise ConfigError("region of interest contains no voxel centers")
    return mask


def _diff(a: Volume, b: Volume, roi) -> np.ndarray:
    if a.grid != b.grid:
        raise GeometryMismatchError("volumes live on different grids")
    m = roi_mask(a.grid, roi)
    return a.values.astype(np.float64)[m] - b.values.astype(np.float64)[m]


def rmse(a: Volume, b: Volume, roi=None) -> float:
    d = _diff(a, b, roi)
    return math.sqrt(float(np.mean(d * d)))


def mae(a: Volume, b: Volume, roi=None) -> float:
    return float(np.mean(np.abs(_diff(a, b, roi))))


def psnr(a: Volume, b: Volume, peak: float, roi=None) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical volumes."""
    err = rmse(a, b, roi)
    if err == 0:
        return math.inf
    return 20.0 * math.log10(peak / err)


def format_metrics(values: dict[str, float]) -> str:
    """``key=value`` lines; infinities print as ``inf``."""
    lines = []
    for key, val in values.items():
        if isinstance(val, float):
            lines.append(f"{key}={'inf' if math.isinf(val) else format(val, '.9g')}")
        else:
            lines.append(f"{key}={val}")
    return "\n".join(lines) + "\n"
