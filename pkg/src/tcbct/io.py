"""Binary containers for volumes, projection stacks and INR checkpoints, plus PGM slice export.

Byte layouts (all little-endian):

Volume (``TCBCTVOL``)::

    8s   magic
    u32  version (1)
    3*u64  nx, ny, nz
    9*f64  bbox_min xyz, bbox_max xyz, voxel xyz
    f32[nz, ny, nx]  payload, x fastest

Projections (``TCBCTPRJ``)::

    8s   magic
    u32  version (1)
    3*u64  det_cols, det_rows, n_angles
    8*f64  sdd, sid, pixel_u, pixel_v, offset_u, offset_v, angle_start, angle_end
    f32[n_angles, det_rows, det_cols]  payload, column fastest

INR checkpoint (``TCBCTINR``)::

    8s   magic
    u32  version (1)
    u32  header length in bytes
    UTF-8 ``key = value`` lines (every encoding, MLP and shape field)
    f32 blocks: tables (levels, table_size, features), then W, b per layer
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .errors import BadMagicError, ConfigError, FormatError, TruncatedPayloadError, VersionMismatchError
from .geometry import ScanGeometry, VolumeGrid
from .projector import ProjectionStack, Volume

VERSION = 1
VOL_MAGIC = b"TCBCTVOL"
PRJ_MAGIC = b"TCBCTPRJ"
INR_MAGIC = b"TCBCTINR"

_VOL_HEADER = struct.Struct("<8sI3Q9d")
_PRJ_HEADER = struct.Struct("<8sI3Q8d")
_INR_PREFIX = struct.Struct("<8sII")
_F32 = np.dtype("<f4")

AXES = ("axial", "sagittal", "coronal")


def _write_atomic(path, chunks) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".part")
    with open(tmp, "wb") as fh:
        for chunk in chunks:
            fh.write(chunk)
    os.replace(tmp, path)


def _check_prefix(raw: bytes, header: struct.Struct, magic: bytes, path) -> tuple:
    if len(raw) < 12:
        raise TruncatedPayloadError(f"{path}: file too short for a header")
    if raw[:8] != magic:
        raise BadMagicError(f"{path}: expected magic {magic!r}, found {raw[:8]!r}")
    version = struct.unpack_from("<I", raw, 8)[0]
    if version != VERSION:
        raise VersionMismatchError(f"{path}: unsupported version {version} (expected {VERSION})")
    if len(raw) < header.size:
        raise TruncatedPayloadError(f"{path}: truncated header")
    return header.unpack_from(raw, 0)


def _payload(raw: bytes, offset: int, shape: tuple[int, ...], path) -> np.ndarray:
    expected = int(np.prod(shape)) * 4
    got = len(raw) - offset
    if got != expected:
        raise TruncatedPayloadError(f"{path}: payload has {got} bytes, header implies {expected}")
    return np.frombuffer(raw, dtype=_F32, offset=offset).reshape(shape).astype(np.float32)


def write_volume(path, vol: Volume) -> None:
    g = vol.grid
    nx, ny, nz = g.dims
    head = _VOL_HEADER.pack(VOL_MAGIC, VERSION, nx, ny, nz, *g.bbox_min, *g.bbox_max, *g.voxel)
    _write_atomic(path, [head, np.ascontiguousarray(vol.values, dtype=_F32).tobytes()])


def read_volume(path) -> Volume:
    raw = Path(path).read_bytes()
    fields = _check_prefix(raw, _VOL_HEADER, VOL_MAGIC, path)
    nx, ny, nz = fields[2:5]
    vals = fields[5:]
    grid = VolumeGrid(tuple(vals[0:3]), tuple(vals[3:6]), tuple(vals[6:9]))
    if grid.dims != (nx, ny, nz):
        raise FormatError(f"{path}: dims {nx, ny, nz} disagree with the stored grid {grid.dims}")
    return Volume(grid, _payload(raw, _VOL_HEADER.size, (nz, ny, nx), path))


def write_projections(path, p: ProjectionStack) -> None:
    g = p.geom
    head = _PRJ_HEADER.pack(PRJ_MAGIC, VERSION, g.det_cols, g.det_rows, g.n_angles,
                            g.sdd, g.sid, g.pixel_u, g.pixel_v, g.offset_u, g.offset_v,
                            g.angle_start, g.angle_end)
    _write_atomic(path, [head, np.ascontiguousarray(p.data, dtype=_F32).tobytes()])


def read_projections(path) -> ProjectionStack:
    raw = Path(path).read_bytes()
    fields = _check_prefix(raw, _PRJ_HEADER, PRJ_MAGIC, path)
    cols, rows, n_ang = fields[2:5]
    sdd, sid, pu, pv, ou, ov, a0, a1 = fields[5:]
    geom = ScanGeometry(sdd, sid, cols, rows, pu, pv, ou, ov, n_ang, a0, a1)
    return ProjectionStack(geom, _payload(raw, _PRJ_HEADER.size, (n_ang, rows, cols), path))


# -- checkpoints ----------------------------------------------------------------

def _checkpoint_header(model) -> str:
    e, m = model.enc, model.mlp
    items = {
        "bbox_min": " ".join(repr(float(v)) for v in e.bbox_min),
        "bbox_max": " ".join(repr(float(v)) for v in e.bbox_max),
        "levels": e.levels, "table_size": e.table_size, "features": e.features,
        "base_resolution": e.base_resolution, "growth": repr(float(e.growth)),
        "hidden_layers": m.hidden_layers, "width": m.width, "activation": m.activation,
        "output_map": m.output_map, "output_bias": repr(float(m.output_bias)),
    }
    return "".join(f"{k} = {v}\n" for k, v in items.items())


def write_checkpoint(path, model) -> None:
    text = _checkpoint_header(model).encode("utf-8")
    blocks = [np.ascontiguousarray(a, dtype=_F32).tobytes() for a in model.arrays()]
    _write_atomic(path, [_INR_PREFIX.pack(INR_MAGIC, VERSION, len(text)), text, *blocks])


def read_checkpoint(path):
    from .inr import HashGridConfig, InrModel, MlpConfig

    raw = Path(path).read_bytes()
    _, _, n_text = _check_prefix(raw, _INR_PREFIX, INR_MAGIC, path)
    start = _INR_PREFIX.size
    if len(raw) < start + n_text:
        raise TruncatedPayloadError(f"{path}: truncated checkpoint header")
    kv = {}
    for line in raw[start:start + n_text].decode("utf-8").splitlines():
        if line.strip():
            key, _, val = line.partition("=")
            kv[key.strip()] = val.strip()
    try:
        enc = HashGridConfig(
            tuple(float(v) for v in kv["bbox_min"].split()),
            tuple(float(v) for v in kv["bbox_max"].split()),
            int(kv["levels"]), int(kv["table_size"]), int(kv["features"]),
            int(kv["base_resolution"]), float(kv["growth"]))
        mlp = MlpConfig(int(kv["hidden_layers"]), int(kv["width"]), kv["activation"],
                        kv["output_map"], float(kv["output_bias"]))
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: bad checkpoint header ({exc})") from exc

    sizes = [enc.out_dim] + [mlp.width] * mlp.hidden_layers + [1]
    shapes = [(enc.levels, enc.table_size, enc.features)]
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        shapes += [(fan_in, fan_out), (fan_out,)]
    offset = start + n_text
    expected = sum(int(np.prod(s)) for s in shapes) * 4
    if len(raw) - offset != expected:
        raise TruncatedPayloadError(f"{path}: payload has {len(raw) - offset} bytes, expected {expected}")
    arrays = []
    for shape in shapes:
        n = int(np.prod(shape))
        arrays.append(np.frombuffer(raw, dtype=_F32, count=n, offset=offset).reshape(shape).astype(np.float32))
        offset += 4 * n
    layers = [(arrays[i], arrays[i + 1]) for i in range(1, len(arrays), 2)]
    return InrModel(enc, mlp, arrays[0], layers)


# -- slice export ---------------------------------------------------------------

def slice_plane(vol: Volume, axis: str, index: int) -> np.ndarray:
    """2-D plane in display orientation (rows top to bottom).

    axial: xy plane at z index, rows follow y.  sagittal: yz plane at x index,
    coronal: xz plane at y index; both put +z at the top.
    """
    if axis not in AXES:
        raise ConfigError(f"axis must be one of {AXES}, got {axis!r}")
    v = vol.values
    n = {"axial": v.shape[0], "sagittal": v.shape[2], "coronal": v.shape[1]}[axis]
    if not 0 <= index < n:
        raise IndexError(f"{axis} index {index} outside [0, {n})")
    if axis == "axial":
        return v[index]
    if axis == "sagittal":
        return v[::-1, :, index]
    return v[::-1, index, :]


def window_to_u16(plane: np.ndarray, level: float, width: float) -> np.ndarray:
    if not width > 0:
        raise ConfigError("window width must be > 0")
    t = (plane.astype(np.float64) - (level - width / 2.0)) / width
    # round half up
    return np.floor(np.clip(t, 0.0, 1.0) * 65535.0 + 0.5).astype(np.uint16)


def export_slice(vol: Volume, axis: str, index: int, window_level: float,
                 window_width: float, path) -> None:
    img = window_to_u16(slice_plane(vol, axis, index), window_level, window_width)
    h, w = img.shape
    _write_atomic(path, [f"P5\n{w} {h}\n65535\n".encode("ascii"), img.astype(">u2").tobytes()])


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5" or parts[3] != b"65535":
        raise BadMagicError(f"{path}: not a 16-bit binary PGM")
    w, h = int(parts[1]), int(parts[2])
    data = parts[4]
    if len(data) != w * h * 2:
        raise TruncatedPayloadError(f"{path}: pixel data has {len(data)} bytes, expected {w * h * 2}")
    return np.frombuffer(data, dtype=">u2").reshape(h, w).astype(np.uint16)
