"""Analytic ellipsoid phantoms with half-space clipping.

Densities are in mm^-1, so line integrals are dimensionless attenuation
exponents.  Ellipsoids add; negative densities carve.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .geometry import Ray, VolumeGrid


def euler_matrix(e1: float, e2: float, e3: float) -> np.ndarray:
    """``Rz(e1) @ Ry(e2) @ Rx(e3)``."""
    c1, s1 = math.cos(e1), math.sin(e1)
    c2, s2 = math.cos(e2), math.sin(e2)
    c3, s3 = math.cos(e3), math.sin(e3)
    rz = np.array([[c1, -s1, 0], [s1, c1, 0], [0, 0, 1]])
    ry = np.array([[c2, 0, s2], [0, 1, 0], [-s2, 0, c2]])
    rx = np.array([[1, 0, 0], [0, c3, -s3], [0, s3, c3]])
    return rz @ ry @ rx


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple[float, float, float]
    semi_axes: tuple[float, float, float]
    rotation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    density: float = 1.0
    # (nx, ny, nz, d): keep points with n.x <= d
    clips: tuple[tuple[float, float, float, float], ...] = ()
    matrix: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if any(not a > 0 for a in self.semi_axes):
            raise ConfigError("ellipsoid semi-axes must be positive")
        for clip in self.clips:
            if abs(math.sqrt(clip[0] ** 2 + clip[1] ** 2 + clip[2] ** 2) - 1.0) > 1e-9:
                raise ConfigError(f"clip normal {clip[:3]} is not unit length")
        object.__setattr__(self, "matrix", euler_matrix(*self.rotation))

    def contains(self, pts: np.ndarray) -> np.ndarray:
        """Boolean mask for points of shape (..., 3)."""
        local = (pts - np.asarray(self.center)) @ self.matrix
        inside = np.sum((local / np.asarray(self.semi_axes)) ** 2, axis=-1) <= 1.0
        for nx, ny, nz, d in self.clips:
            inside &= pts @ np.array([nx, ny, nz]) <= d
        return inside

    def chords(self, origins: np.ndarray, dirs: np.ndarray, t0: np.ndarray, t1: np.ndarray) -> np.ndarray:
        """Exact intersection length with each segment ``origin + t*dir, t0 <= t <= t1``.

        Clipping cuts the ellipsoid by convex half-spaces, so the clipped chord
        is still one interval along the line.
        """
        axes = np.asarray(self.semi_axes)
        o = ((origins - np.asarray(self.center)) @ self.matrix) / axes
        d = (dirs @ self.matrix) / axes
        a = np.sum(d * d, axis=-1)
        b = np.sum(o * d, axis=-1)
        c = np.sum(o * o, axis=-1) - 1.0
        disc = b * b - a * c
        hit = disc > 0
        root = np.sqrt(np.where(hit, disc, 0.0))
        lo = np.where(hit, (-b - root) / a, 0.0)
        hi = np.where(hit, (-b + root) / a, 0.0)
        lo = np.maximum(lo, t0)
        hi = np.minimum(hi, t1)
        for nx, ny, nz, dist in self.clips:
            n = np.array([nx, ny, nz])
            nd = dirs @ n
            rhs = dist - origins @ n
            with np.errstate(divide="ignore", invalid="ignore"):
                t_edge = rhs / nd
            hi = np.where(nd > 0, np.minimum(hi, t_edge), hi)
            lo = np.where(nd < 0, np.maximum(lo, t_edge), lo)
            # parallel to the plane: all or nothing
            hi = np.where((nd == 0) & (rhs < 0), lo, hi)
        return np.where(hit, np.maximum(hi - lo, 0.0), 0.0)

    def scaled(self, factor: float) -> "Ellipsoid":
        clips = tuple((nx, ny, nz, d * factor) for nx, ny, nz, d in self.clips)
        return replace(
            self,
            center=tuple(c * factor for c in self.center),
            semi_axes=tuple(a * factor for a in self.semi_axes),
            clips=clips,
        )


@dataclass(frozen=True)
class Phantom:
    ellipsoids: tuple[Ellipsoid, ...] = ()

    def scaled(self, factor: float) -> "Phantom":
        """Uniformly scale all lengths about the origin; densities unchanged."""
        return Phantom(tuple(e.scaled(factor) for e in self.ellipsoids))

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Loose axis-aligned bounds (ignores clipping)."""
        lo = np.full(3, np.inf)
        hi = np.full(3, -np.inf)
        for e in self.ellipsoids:
            # half-widths of a rotated ellipsoid's bounding box
            half = np.sqrt(((e.matrix * np.asarray(e.semi_axes)) ** 2).sum(axis=1))
            lo = np.minimum(lo, np.asarray(e.center) - half)
            hi = np.maximum(hi, np.asarray(e.center) + half)
        return lo, hi


def sample_density(ph: Phantom, x) -> np.ndarray | float:
    """Density at one point or an array of points with trailing axis 3."""
    pts = np.asarray(x, dtype=np.float64)
    out = np.zeros(pts.shape[:-1])
    for e in ph.ellipsoids:
        out += np.where(e.contains(pts), e.density, 0.0)
    return float(out) if out.ndim == 0 else out


def segment_integrals(ph: Phantom, origins, dirs, t0, t1) -> np.ndarray:
    """Vectorized line integrals over segments; ``dirs`` must be unit vectors."""
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    t0 = np.asarray(t0, dtype=np.float64)
    t1 = np.asarray(t1, dtype=np.float64)
    out = np.zeros(origins.shape[:-1])
    for e in ph.ellipsoids:
        out += e.density * e.chords(origins, dirs, t0, t1)
    return out


def analytic_line_integral(ph: Phantom, ray: Ray) -> float:
    if ray.empty:
        return 0.0
    val = segment_integrals(ph, np.asarray(ray.origin)[None], np.asarray(ray.direction)[None],
                            np.array([ray.t_near]), np.array([ray.t_far]))
    return float(val[0])


def voxelize(ph: Phantom, grid: VolumeGrid, supersample: int = 1):
    """Float32 Volume holding the mean density over ``supersample**3`` stratified points per voxel."""
    from .projector import Volume

    if supersample < 1:
        raise ConfigError("supersample must be >= 1")
    s = supersample
    offs = (np.arange(s) + 0.5) / s - 0.5
    xs = (grid.axis_centers(0)[:, None] + offs[None, :] * grid.voxel[0]).ravel()
    ys = (grid.axis_centers(1)[:, None] + offs[None, :] * grid.voxel[1]).ravel()
    nz, ny, nx = grid.shape
    out = np.empty(grid.shape, dtype=np.float64)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    for k in range(nz):
        zs = grid.axis_centers(2)[k] + offs * grid.voxel[2]
        acc = np.zeros((ny * s, nx * s))
        for z in zs:
            pts = np.stack([xx, yy, np.full_like(xx, z)], axis=-1)
            acc += sample_density(ph, pts)
        out[k] = acc.reshape(ny, s, nx, s).mean(axis=(1, 3)) / s
    return Volume(grid, out.astype(np.float32))


def parse_phantom(text: str) -> Phantom:
    """Parse the line-oriented phantom format.

    ``ellipsoid cx cy cz a b c e1 e2 e3 density [clip nx ny nz d]*``
    """
    items = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if tok[0] != "ellipsoid" or len(tok) < 11:
            raise ConfigError(f"line {lineno}: expected 'ellipsoid' and 10 numbers")
        try:
            nums = [float(t) for t in tok[1:11]]
            clips = []
            rest = tok[11:]
            while rest:
                if rest[0] != "clip" or len(rest) < 5:
                    raise ConfigError(f"line {lineno}: malformed clip")
                clips.append(tuple(float(t) for t in rest[1:5]))
                rest = rest[5:]
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
        items.append(Ellipsoid(tuple(nums[0:3]), tuple(nums[3:6]), tuple(nums[6:9]),
                               nums[9], tuple(clips)))
    return Phantom(tuple(items))


def format_phantom(ph: Phantom) -> str:
    lines = []
    for e in ph.ellipsoids:
        nums = [*e.center, *e.semi_axes, *e.rotation, e.density]
        line = "ellipsoid " + " ".join(repr(float(v)) for v in nums)
        for clip in e.clips:
            line += " clip " + " ".join(repr(float(v)) for v in clip)
        lines.append(line)
    return "\n".join(lines) + "\n"


def load_phantom(path: str | Path) -> Phantom:
    return parse_phantom(Path(path).read_text())


def builtin_head_phantom() -> Phantom:
    """Dental head phantom sized for the full-scale grids (see data/head_phantom.txt)."""
    text = resources.files("tcbct").joinpath("data/head_phantom.txt").read_text()
    return parse_phantom(text)
