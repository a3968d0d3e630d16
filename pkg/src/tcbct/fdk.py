"""Feldkamp-Davis-Kress filtered backprojection for flat, offset detectors.

Full-scan data from an offset detector measure the central band of lines
twice (direct and conjugate views).  Those views are blended with a smooth
``sin^2`` weight in fan angle whose conjugate pairs sum to one, so the
``1/2`` of the symmetric full-scan formula is absorbed into the weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from .errors import ConfigError
from .geometry import ScanGeometry, VolumeGrid
from .projector import ProjectionStack, Volume


@dataclass(frozen=True)
class FilterSpec:
    kind: str = "ramp_hann"
    padding: int | None = None

    def __post_init__(self):
        if self.kind not in ("ramp", "ramp_hann"):
            raise ConfigError(f"unknown filter kind {self.kind!r}")
        if self.padding is not None and (self.padding < 2 or self.padding & (self.padding - 1)):
            raise ConfigError("filter padding must be a power of two")

    def padded_length(self, n_cols: int) -> int:
        if self.padding is None:
            return 1 << max(1, (2 * n_cols - 1).bit_length())
        if self.padding < 2 * n_cols:
            raise ConfigError(f"padding {self.padding} < 2 * det_cols ({2 * n_cols})")
        return self.padding


def ramlak_kernel(n: int, pixel: float) -> np.ndarray:
    """Discrete band-limited ramp taps ``h[k]`` for offsets ``k = -n+1 .. n-1``."""
    k = np.arange(-n + 1, n)
    h = np.zeros(k.shape)
    h[k == 0] = 1.0 / (4.0 * pixel * pixel)
    odd = k % 2 == 1
    h[odd] = -1.0 / (math.pi * k[odd] * pixel) ** 2
    return h


def _frequency_response(n_pad: int, pixel: float, kind: str) -> np.ndarray:
    k = np.arange(n_pad)
    offs = np.where(k < n_pad // 2, k, k - n_pad)
    taps = np.zeros(n_pad)
    taps[offs == 0] = 1.0 / (4.0 * pixel * pixel)
    odd = offs % 2 == 1
    taps[odd] = -1.0 / (math.pi * offs[odd] * pixel) ** 2
    resp = np.fft.rfft(taps).real
    if kind == "ramp_hann":
        omega = 2.0 * math.pi * np.arange(resp.size) / n_pad
        resp = resp * 0.5 * (1.0 + np.cos(omega))
    return resp


def filter_array(rows: np.ndarray, pixel: float, f: FilterSpec) -> np.ndarray:
    """Convolve the last axis with the ramp taps (no ``pixel`` quadrature factor)."""
    n = rows.shape[-1]
    n_pad = f.padded_length(n)
    resp = _frequency_response(n_pad, pixel, f.kind)
    spec = np.fft.rfft(rows, n=n_pad, axis=-1)
    return np.fft.irfft(spec * resp, n=n_pad, axis=-1)[..., :n]


def cosine_weights(geom: ScanGeometry) -> np.ndarray:
    """``sdd / sqrt(sdd^2 + u^2 + v^2)`` on the (row, col) detector grid."""
    u = geom.u_coords[None, :]
    v = geom.v_coords[:, None]
    return geom.sdd / np.sqrt(geom.sdd ** 2 + u * u + v * v)


def redundancy_weights(geom: ScanGeometry) -> np.ndarray:
    """Per-column weights for full-scan data; conjugate fan angles sum to one."""
    u = geom.u_coords
    if abs(geom.offset_u) < 1e-9 * geom.pixel_u:
        return np.full(u.shape, 0.5)
    half = geom.det_cols * geom.pixel_u / 2.0
    overlap = half - abs(geom.offset_u)
    if overlap <= 0:
        return np.ones(u.shape)
    gamma = np.arctan(np.sign(geom.offset_u) * u / geom.sdd)
    g0 = math.atan(overlap / geom.sdd)
    s = np.clip(gamma / g0, -1.0, 1.0)
    return np.sin(math.pi / 4.0 * (1.0 + s)) ** 2


def cosine_weight(p: ProjectionStack) -> ProjectionStack:
    return ProjectionStack(p.geom, p.data * cosine_weights(p.geom)[None])


def filter_rows(p: ProjectionStack, f: FilterSpec) -> ProjectionStack:
    return ProjectionStack(p.geom, filter_array(p.data.astype(np.float64), p.geom.pixel_u, f))


@njit(parallel=True, cache=True)
def _backproject(q, angles, xs, ys, zs, sid, sdd, pu, pv, ou, ov, out):
    n_ang, n_rows, n_cols = q.shape
    nz, ny, nx = out.shape
    cu = (n_cols - 1) / 2.0
    cv = (n_rows - 1) / 2.0
    for k in prange(nz):
        z = zs[k]
        for a in range(n_ang):
            c = math.cos(angles[a])
            s = math.sin(angles[a])
            for j in range(ny):
                y = ys[j]
                for i in range(nx):
                    x = xs[i]
                    depth = sid - (x * c + y * s)
                    mag = sdd / depth
                    fc = (mag * (y * c - x * s) - ou) / pu + cu
                    fr = (mag * z - ov) / pv + cv
                    if fc < 0.0 or fr < 0.0 or fc > n_cols - 1 or fr > n_rows - 1:
                        continue
                    c0 = min(int(fc), n_cols - 2) if n_cols > 1 else 0
                    r0 = min(int(fr), n_rows - 2) if n_rows > 1 else 0
                    wc = fc - c0
                    wr = fr - r0
                    c1 = min(c0 + 1, n_cols - 1)
                    r1 = min(r0 + 1, n_rows - 1)
                    val = ((q[a, r0, c0] * (1 - wc) + q[a, r0, c1] * wc) * (1 - wr)
                           + (q[a, r1, c0] * (1 - wc) + q[a, r1, c1] * wc) * wr)
                    out[k, j, i] += val * (sid / depth) ** 2


def fdk_array(data: np.ndarray, geom: ScanGeometry, grid: VolumeGrid, f: FilterSpec) -> np.ndarray:
    if geom.n_angles < 2:
        raise ConfigError("FDK needs at least two views")
    q = np.asarray(data, dtype=np.float64) * cosine_weights(geom)[None]
    q = q * redundancy_weights(geom)[None, None, :]
    q = filter_array(q, geom.pixel_u, f) * geom.pixel_u
    # detector-plane kernel to isocenter scaling, and angular quadrature
    q *= (geom.sdd / geom.sid) * abs(geom.angle_step)
    out = np.zeros(grid.shape)
    _backproject(np.ascontiguousarray(q), geom.angles, grid.axis_centers(0), grid.axis_centers(1),
                 grid.axis_centers(2), geom.sid, geom.sdd, geom.pixel_u, geom.pixel_v,
                 geom.offset_u, geom.offset_v, out)
    return out


def fdk_reconstruct(p: ProjectionStack, grid: VolumeGrid, f: FilterSpec | None = None) -> Volume:
    return Volume(grid, fdk_array(p.data, p.geom, grid, f or FilterSpec()).astype(np.float32))
