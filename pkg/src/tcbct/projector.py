"""Ray-driven interpolating projector ``A`` with a matched adjoint.

Each detector pixel's ray is clipped to the grid box (and to the physical
source-to-pixel segment) and sampled by the midpoint rule at step
``min(voxel) / 2``; the last partial step is weighted by its true length.
The volume is trilinearly interpolated between voxel centers, clamped to the
edge voxels inside the box and zero outside it.  ``back_project`` gathers the
exact same interpolation weights, so it is the matrix transpose of
``forward_project`` up to floating-point rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np
from numba import njit, prange

from .errors import ConfigError, GeometryMismatchError
from .geometry import ScanGeometry, VolumeGrid
from .phantom import Phantom, segment_integrals


def _storage_dtype(a) -> type:
    return np.float64 if getattr(a, "dtype", None) == np.float64 else np.float32


@dataclass
class Volume:
    grid: VolumeGrid
    values: np.ndarray  # (z, y, x); float32 unless built from float64

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=_storage_dtype(self.values))
        if self.values.shape != self.grid.shape:
            raise ConfigError(f"values shape {self.values.shape} != grid shape {self.grid.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ConfigError("volume contains non-finite values")

    @classmethod
    def zeros(cls, grid: VolumeGrid) -> "Volume":
        return cls(grid, np.zeros(grid.shape, dtype=np.float32))


@dataclass
class ProjectionStack:
    geom: ScanGeometry
    data: np.ndarray  # (angle, row, col); float32 unless built from float64

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=_storage_dtype(self.data))
        if self.data.shape != self.geom.shape:
            raise ConfigError(f"data shape {self.data.shape} != geometry shape {self.geom.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ConfigError("projection stack contains non-finite values")


def set_threads(n: int | None) -> None:
    """Cap numba worker threads; ``1`` gives the deterministic mode."""
    if n is not None:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


@njit(cache=True, inline="always")
def _ray_setup(src, det, eu, ev, u, v, lo, hi):
    px = det[0] + u * eu[0] + v * ev[0]
    py = det[1] + u * eu[1] + v * ev[1]
    pz = det[2] + u * eu[2] + v * ev[2]
    dx = px - src[0]
    dy = py - src[1]
    dz = pz - src[2]
    dist = math.sqrt(dx * dx + dy * dy + dz * dz)
    dx /= dist
    dy /= dist
    dz /= dist
    t0 = 0.0
    t1 = dist
    o = (src[0], src[1], src[2])
    d = (dx, dy, dz)
    for a in range(3):
        if d[a] == 0.0:
            if o[a] < lo[a] or o[a] > hi[a]:
                t1 = -1.0
            continue
        ta = (lo[a] - o[a]) / d[a]
        tb = (hi[a] - o[a]) / d[a]
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
    return dx, dy, dz, t0, t1


@njit(cache=True, inline="always")
def _cell(f, top):
    # f indexes the edge-padded array; clamping keeps i0 + 1 in range
    f = min(max(f, 0.0), top)
    i0 = int(f)
    return i0, f - i0


@njit(cache=True, inline="always")
def _interp(vol, fx, fy, fz, tx, ty, tz):
    x0, wx = _cell(fx, tx)
    y0, wy = _cell(fy, ty)
    z0, wz = _cell(fz, tz)
    x1 = x0 + 1
    y1 = y0 + 1
    z1 = z0 + 1
    c00 = vol[z0, y0, x0] + wx * (vol[z0, y0, x1] - vol[z0, y0, x0])
    c01 = vol[z0, y1, x0] + wx * (vol[z0, y1, x1] - vol[z0, y1, x0])
    c10 = vol[z1, y0, x0] + wx * (vol[z1, y0, x1] - vol[z1, y0, x0])
    c11 = vol[z1, y1, x0] + wx * (vol[z1, y1, x1] - vol[z1, y1, x0])
    c0 = c00 + wy * (c01 - c00)
    c1 = c10 + wy * (c11 - c10)
    return c0 + wz * (c1 - c0)


@njit(cache=True, inline="always")
def _flush(vol, x0, y0, z0, a000, a001, a010, a011, a100, a101, a110, a111):
    vol[z0, y0, x0] += a000
    vol[z0, y0, x0 + 1] += a001
    vol[z0, y0 + 1, x0] += a010
    vol[z0, y0 + 1, x0 + 1] += a011
    vol[z0 + 1, y0, x0] += a100
    vol[z0 + 1, y0, x0 + 1] += a101
    vol[z0 + 1, y0 + 1, x0] += a110
    vol[z0 + 1, y0 + 1, x0 + 1] += a111


@njit(cache=True, inline="always")
def _march(src, det, eu, ev, u, v, lo, hi, vox, step):
    """Padded fractional-index start and increment of a ray's midpoint samples."""
    dx, dy, dz, t0, t1 = _ray_setup(src, det, eu, ev, u, v, lo, hi)
    if not t1 > t0:
        return 0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0
    length = t1 - t0
    nfull = int(length / step)
    rem = length - nfull * step
    tm = t0 + 0.5 * step
    fx = (src[0] + tm * dx - lo[0]) / vox[0] + 0.5
    fy = (src[1] + tm * dy - lo[1]) / vox[1] + 0.5
    fz = (src[2] + tm * dz - lo[2]) / vox[2] + 0.5
    gx = step * dx / vox[0]
    gy = step * dy / vox[1]
    gz = step * dz / vox[2]
    # midpoint of the trailing partial step
    tl = t0 + nfull * step + 0.5 * rem
    lx = (src[0] + tl * dx - lo[0]) / vox[0] + 0.5
    ly = (src[1] + tl * dy - lo[1]) / vox[1] + 0.5
    lz = (src[2] + tl * dz - lo[2]) / vox[2] + 0.5
    return nfull, rem, fx, fy, fz, gx, gy, gz, lx, ly, lz


@njit(parallel=True, cache=True, fastmath=True)
def _forward_kernel(vol, lo, hi, vox, src, det, eu, ev, us, vs, step, out):
    n_ang, n_rows, n_cols = out.shape
    nz, ny, nx = vol.shape
    tx = nx - 1.000000001
    ty = ny - 1.000000001
    tz = nz - 1.000000001
    for job in prange(n_ang * n_rows):
        a = job // n_rows
        r = job % n_rows
        sa = src[a]
        da = det[a]
        ua = eu[a]
        va = ev[a]
        for c in range(n_cols):
            nfull, rem, fx, fy, fz, gx, gy, gz, lx, ly, lz = _march(
                sa, da, ua, va, us[c], vs[r], lo, hi, vox, step)
            acc = 0.0
            for k in range(nfull):
                acc += _interp(vol, fx + k * gx, fy + k * gy, fz + k * gz, tx, ty, tz)
            acc *= step
            if rem > 0.0:
                acc += rem * _interp(vol, lx, ly, lz, tx, ty, tz)
            out[a, r, c] = acc


@njit(parallel=True, cache=True, fastmath=True)
def _back_kernel(proj, lo, hi, vox, src, det, eu, ev, us, vs, step, bufs):
    n_ang, n_rows, n_cols = proj.shape
    n_chunks, nz, ny, nx = bufs.shape
    tx = nx - 1.000000001
    ty = ny - 1.000000001
    tz = nz - 1.000000001
    for chunk in prange(n_chunks):
        vol = bufs[chunk]
        for a in range(chunk, n_ang, n_chunks):
            sa = src[a]
            da = det[a]
            ua = eu[a]
            va = ev[a]
            for r in range(n_rows):
                for c in range(n_cols):
                    val = proj[a, r, c]
                    if val == 0.0:
                        continue
                    nfull, rem, fx, fy, fz, gx, gy, gz, lx, ly, lz = _march(
                        sa, da, ua, va, us[c], vs[r], lo, hi, vox, step)
                    # consecutive samples in one cell share their 8 corner writes
                    px = -1
                    py = -1
                    pz = -1
                    a000 = a001 = a010 = a011 = a100 = a101 = a110 = a111 = 0.0
                    for k in range(nfull + 1):
                        if k < nfull:
                            x0, wx = _cell(fx + k * gx, tx)
                            y0, wy = _cell(fy + k * gy, ty)
                            z0, wz = _cell(fz + k * gz, tz)
                            s = val * step
                        else:
                            if rem <= 0.0:
                                break
                            x0, wx = _cell(lx, tx)
                            y0, wy = _cell(ly, ty)
                            z0, wz = _cell(lz, tz)
                            s = val * rem
                        if x0 != px or y0 != py or z0 != pz:
                            if px >= 0:
                                _flush(vol, px, py, pz, a000, a001, a010, a011,
                                       a100, a101, a110, a111)
                            px = x0
                            py = y0
                            pz = z0
                            a000 = a001 = a010 = a011 = a100 = a101 = a110 = a111 = 0.0
                        s0 = s * (1.0 - wz)
                        s1 = s * wz
                        s00 = s0 * (1.0 - wy)
                        s01 = s0 * wy
                        s10 = s1 * (1.0 - wy)
                        s11 = s1 * wy
                        a000 += s00 * (1.0 - wx)
                        a001 += s00 * wx
                        a010 += s01 * (1.0 - wx)
                        a011 += s01 * wx
                        a100 += s10 * (1.0 - wx)
                        a101 += s10 * wx
                        a110 += s11 * (1.0 - wx)
                        a111 += s11 * wx
                    if px >= 0:
                        _flush(vol, px, py, pz, a000, a001, a010, a011, a100, a101, a110, a111)


def _fold_pad(padded: np.ndarray) -> np.ndarray:
    """Adjoint of ``np.pad(x, 1, mode="edge")`` for a 3-D array."""
    a = padded
    for axis in range(3):
        a = np.moveaxis(a, axis, 0).copy()
        a[1] += a[0]
        a[-2] += a[-1]
        a = np.moveaxis(a[1:-1], 0, axis)
    return np.ascontiguousarray(a)


class Projector:
    """``A`` and ``A^T`` for one geometry/grid pair on float64 arrays."""

    def __init__(self, geom: ScanGeometry, grid: VolumeGrid, step: float | None = None):
        self.geom = geom
        self.grid = grid
        self.step = float(step) if step is not None else min(grid.voxel) / 2.0
        src, det, eu, ev = geom.view_vectors()
        self._src = np.ascontiguousarray(src)
        self._det = np.ascontiguousarray(det)
        self._eu = np.ascontiguousarray(eu)
        self._ev = np.ascontiguousarray(ev)
        # pixel offsets are applied through the local coordinates
        self._us = np.ascontiguousarray(geom.u_coords)
        self._vs = np.ascontiguousarray(geom.v_coords)
        self._lo = np.array(grid.bbox_min)
        self._hi = np.array(grid.bbox_max)
        self._vox = np.array(grid.voxel)

    def forward(self, vol: np.ndarray) -> np.ndarray:
        vol = np.ascontiguousarray(vol, dtype=np.float64)
        if vol.shape != self.grid.shape:
            raise GeometryMismatchError(f"volume shape {vol.shape} != grid shape {self.grid.shape}")
        out = np.empty(self.geom.shape, dtype=np.float64)
        padded = np.pad(vol, 1, mode="edge")
        _forward_kernel(padded, self._lo, self._hi, self._vox, self._src, self._det, self._eu,
                        self._ev, self._us, self._vs, self.step, out)
        return out

    def back(self, proj: np.ndarray) -> np.ndarray:
        proj = np.ascontiguousarray(proj, dtype=np.float64)
        if proj.shape != self.geom.shape:
            raise GeometryMismatchError(f"projection shape {proj.shape} != {self.geom.shape}")
        n_chunks = max(1, min(numba.get_num_threads(), self.geom.n_angles))
        nz, ny, nx = self.grid.shape
        bufs = np.zeros((n_chunks, nz + 2, ny + 2, nx + 2), dtype=np.float64)
        _back_kernel(proj, self._lo, self._hi, self._vox, self._src, self._det, self._eu,
                     self._ev, self._us, self._vs, self.step, bufs)
        acc = bufs[0]
        for i in range(1, n_chunks):
            acc += bufs[i]
        return _fold_pad(acc)

    def weights(self) -> np.ndarray:
        """``A^T A 1``, the separable-surrogate denominator."""
        return self.back(self.forward(np.ones(self.grid.shape)))


def forward_project(vol: Volume, geom: ScanGeometry) -> ProjectionStack:
    """Float32 projections of ``vol``; use ``Projector`` for float64 work."""
    out = Projector(geom, vol.grid).forward(vol.values)
    return ProjectionStack(geom, out.astype(np.float32))


def back_project(p: ProjectionStack, grid: VolumeGrid) -> Volume:
    return Volume(grid, Projector(p.geom, grid).back(p.data).astype(np.float32))


def sqs_weights(geom: ScanGeometry, grid: VolumeGrid) -> Volume:
    return Volume(grid, Projector(geom, grid).weights().astype(np.float32))


def pixel_rays(geom: ScanGeometry, angle_index: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Origins, unit directions and source-to-pixel lengths for one view.

    Arrays have shapes (rows, cols, 3), (rows, cols, 3) and (rows, cols).
    """
    src, det, eu, ev = geom.view_vectors()
    a = angle_index
    pix = (det[a][None, None, :]
           + geom.u_coords[None, :, None] * eu[a][None, None, :]
           + geom.v_coords[:, None, None] * ev[a][None, None, :])
    diff = pix - src[a]
    dist = np.linalg.norm(diff, axis=-1)
    dirs = diff / dist[..., None]
    origins = np.broadcast_to(src[a], dirs.shape)
    return origins, dirs, dist


def simulate_projections(ph: Phantom, geom: ScanGeometry, noise_sigma: float = 0.0,
                         seed: int = 0) -> ProjectionStack:
    """Exact line integrals of the analytic phantom, optionally with Gaussian noise."""
    if noise_sigma < 0:
        raise ConfigError("noise_sigma must be >= 0")
    data = np.empty(geom.shape, dtype=np.float32)
    for a in range(geom.n_angles):
        origins, dirs, dist = pixel_rays(geom, a)
        data[a] = segment_integrals(ph, origins, dirs, np.zeros_like(dist), dist)
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        data += rng.normal(0.0, noise_sigma, size=data.shape).astype(np.float32)
    return ProjectionStack(geom, data)
