"""Circular cone-beam acquisition geometry and voxel lattices.

World frame: isocenter at the origin, the source rotates counterclockwise in
the xy-plane starting on +x, z is the patient axis.  The flat detector faces
the source; its local ``u`` axis is the in-plane tangent ``(-sin a, cos a, 0)``
and its ``v`` axis is +z.  A positive ``offset_u`` shifts the detector center
toward +u.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import ConfigError

Vec3 = tuple[float, float, float]


@dataclass(frozen=True)
class ScanGeometry:
    """Circular cone-beam scan with a flat, possibly offset detector (mm, rad)."""

    sdd: float
    sid: float
    det_cols: int
    det_rows: int
    pixel_u: float
    pixel_v: float
    offset_u: float = 0.0
    offset_v: float = 0.0
    n_angles: int = 1
    angle_start: float = 0.0
    angle_end: float = 2.0 * math.pi

    def __post_init__(self):
        if not (self.sdd > self.sid > 0):
            raise ConfigError(f"need sdd > sid > 0, got sdd={self.sdd}, sid={self.sid}")
        if not (self.pixel_u > 0 and self.pixel_v > 0):
            raise ConfigError("pixel sizes must be positive")
        if self.det_cols < 1 or self.det_rows < 1 or self.n_angles < 1:
            raise ConfigError("detector size and angle count must be >= 1")
        for name in ("sdd", "sid", "pixel_u", "pixel_v", "offset_u", "offset_v",
                     "angle_start", "angle_end"):
            if not math.isfinite(getattr(self, name)):
                raise ConfigError(f"{name} must be finite")

    @cached_property
    def angles(self) -> np.ndarray:
        step = (self.angle_end - self.angle_start) / self.n_angles
        return self.angle_start + np.arange(self.n_angles) * step

    @property
    def angle_step(self) -> float:
        return (self.angle_end - self.angle_start) / self.n_angles

    @property
    def shape(self) -> tuple[int, int, int]:
        """Projection stack shape ``(angle, row, col)``."""
        return (self.n_angles, self.det_rows, self.det_cols)

    @cached_property
    def u_coords(self) -> np.ndarray:
        """Local u of every column center, offsets included."""
        c = np.arange(self.det_cols, dtype=np.float64)
        return (c - (self.det_cols - 1) / 2.0) * self.pixel_u + self.offset_u

    @cached_property
    def v_coords(self) -> np.ndarray:
        r = np.arange(self.det_rows, dtype=np.float64)
        return (r - (self.det_rows - 1) / 2.0) * self.pixel_v + self.offset_v

    @property
    def is_full_scan(self) -> bool:
        return abs(self.angle_end - self.angle_start) >= 2.0 * math.pi * (1 - 1e-9)

    def view_vectors(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Per-angle source, detector center (zero offset), u axis and v axis.

        Each array has shape ``(n_angles, 3)``.
        """
        a = self.angles
        c, s = np.cos(a), np.sin(a)
        zero = np.zeros_like(a)
        src = self.sid * np.stack([c, s, zero], axis=1)
        det = (self.sid - self.sdd) * np.stack([c, s, zero], axis=1)
        eu = np.stack([-s, c, zero], axis=1)
        ev = np.stack([zero, zero, np.ones_like(a)], axis=1)
        return src, det, eu, ev


@dataclass(frozen=True)
class VolumeGrid:
    """Axis-aligned voxel lattice; triples are ordered (x, y, z) in mm."""

    bbox_min: Vec3
    bbox_max: Vec3
    voxel: Vec3
    dims: tuple[int, int, int] = field(init=False)

    def __post_init__(self):
        lo = tuple(float(v) for v in self.bbox_min)
        hi = tuple(float(v) for v in self.bbox_max)
        vox = tuple(float(v) for v in self.voxel)
        if len(lo) != 3 or len(hi) != 3 or len(vox) != 3:
            raise ConfigError("grid triples must have three components")
        object.__setattr__(self, "bbox_min", lo)
        object.__setattr__(self, "bbox_max", hi)
        object.__setattr__(self, "voxel", vox)
        dims = []
        for a in range(3):
            if not lo[a] < hi[a]:
                raise ConfigError(f"bbox_min must be < bbox_max on axis {a}")
            if not vox[a] > 0:
                raise ConfigError("voxel sizes must be positive")
            exact = (hi[a] - lo[a]) / vox[a]
            n = int(round(exact))
            if n < 1 or abs(exact - n) * vox[a] >= 1e-6 * vox[a]:
                raise ConfigError(f"extent on axis {a} is not a whole number of voxels")
            dims.append(n)
        object.__setattr__(self, "dims", tuple(dims))

    @property
    def shape(self) -> tuple[int, int, int]:
        """Array shape in storage order ``(z, y, x)``."""
        nx, ny, nz = self.dims
        return (nz, ny, nx)

    @property
    def size(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    def axis_centers(self, axis: int) -> np.ndarray:
        return self.bbox_min[axis] + (np.arange(self.dims[axis]) + 0.5) * self.voxel[axis]

    def voxel_center(self, i: int, j: int, k: int) -> Vec3:
        idx = (i, j, k)
        return tuple(self.bbox_min[a] + (idx[a] + 0.5) * self.voxel[a] for a in range(3))

    def center_coords(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Broadcastable (z, y, x)-ordered arrays of voxel-center x, y, z."""
        x = self.axis_centers(0)[None, None, :]
        y = self.axis_centers(1)[None, :, None]
        z = self.axis_centers(2)[:, None, None]
        return x, y, z

    def contains(self, other: "VolumeGrid", strict: bool = False) -> bool:
        for a in range(3):
            if strict:
                if not (self.bbox_min[a] < other.bbox_min[a] and other.bbox_max[a] < self.bbox_max[a]):
                    return False
            elif not (self.bbox_min[a] <= other.bbox_min[a] and other.bbox_max[a] <= self.bbox_max[a]):
                return False
        return True


@dataclass(frozen=True)
class Ray:
    origin: Vec3
    direction: Vec3
    t_near: float
    t_far: float
    empty: bool = False

    @property
    def length(self) -> float:
        return 0.0 if self.empty else self.t_far - self.t_near

    def point(self, t: float) -> np.ndarray:
        return np.asarray(self.origin) + t * np.asarray(self.direction)


def source_position(geom: ScanGeometry, angle: float) -> Vec3:
    return (geom.sid * math.cos(angle), geom.sid * math.sin(angle), 0.0)


def detector_local_uv(geom: ScanGeometry, col: int, row: int) -> tuple[float, float]:
    if not (0 <= col < geom.det_cols and 0 <= row < geom.det_rows):
        raise IndexError(f"pixel ({col}, {row}) outside a {geom.det_cols}x{geom.det_rows} detector")
    u = (col - (geom.det_cols - 1) / 2.0) * geom.pixel_u + geom.offset_u
    v = (row - (geom.det_rows - 1) / 2.0) * geom.pixel_v + geom.offset_v
    return u, v


def detector_pixel_center(geom: ScanGeometry, angle: float, col: int, row: int) -> Vec3:
    u, v = detector_local_uv(geom, col, row)
    c, s = math.cos(angle), math.sin(angle)
    d = geom.sid - geom.sdd
    return (d * c - u * s, d * s + u * c, v)


def slab_intersect(origin, direction, bbox_min, bbox_max) -> tuple[float, float]:
    """Entry/exit parameters of a line against a box; ``t0 > t1`` means a miss."""
    t0, t1 = -math.inf, math.inf
    for a in range(3):
        o, d = origin[a], direction[a]
        if d == 0.0:
            if o < bbox_min[a] or o > bbox_max[a]:
                return math.inf, -math.inf
            continue
        ta = (bbox_min[a] - o) / d
        tb = (bbox_max[a] - o) / d
        if ta > tb:
            ta, tb = tb, ta
        t0 = max(t0, ta)
        t1 = min(t1, tb)
    return t0, t1


def ray_for_pixel(geom: ScanGeometry, angle: float, col: int, row: int, clip: VolumeGrid) -> Ray:
    """Source-to-pixel ray clipped to ``clip``'s box and to the physical segment.

    The physical segment ends at the detector pixel, so parts of a box lying
    behind the detector are never traversed.
    """
    src = source_position(geom, angle)
    pix = detector_pixel_center(geom, angle, col, row)
    diff = [pix[a] - src[a] for a in range(3)]
    dist = math.sqrt(sum(d * d for d in diff))
    direction = tuple(d / dist for d in diff)
    t0, t1 = slab_intersect(src, direction, clip.bbox_min, clip.bbox_max)
    t0, t1 = max(t0, 0.0), min(t1, dist)
    if not t0 < t1:
        return Ray(src, direction, 0.0, 0.0, empty=True)
    return Ray(src, direction, t0, t1)


def fov_radius(geom: ScanGeometry) -> float:
    """Radius of the centered in-plane disk over which every line is measured.

    A full 2*pi scan sees each line twice (direct and conjugate), so an offset
    detector covers the disk set by its wider side.  Shorter arcs are bounded
    by the narrower side.
    """
    half = geom.det_cols * geom.pixel_u / 2.0
    lo = -half + geom.offset_u
    hi = half + geom.offset_u
    if lo > 0 or hi < 0:
        return 0.0
    u = max(-lo, hi) if geom.is_full_scan else min(-lo, hi)
    return geom.sid * u / math.hypot(geom.sdd, u)
