import struct

import numpy as np
import pytest

from tcbct.errors import BadMagicError, ConfigError, TruncatedPayloadError, VersionMismatchError
from tcbct.geometry import ScanGeometry, VolumeGrid
from tcbct.inr import HashGridConfig, InrModel, MlpConfig
from tcbct.io import (export_slice, read_checkpoint, read_pgm, read_projections, read_volume,
                      slice_plane, window_to_u16, write_checkpoint, write_projections, write_volume)
from tcbct.projector import ProjectionStack, Volume

GRID = VolumeGrid((-4.0, -3.0, -2.0), (4.0, 5.0, 1.0), (1.0, 2.0, 0.5))


@pytest.fixture
def vol(rng):
    return Volume(GRID, rng.standard_normal(GRID.shape).astype(np.float32))


@pytest.fixture
def stack(rng):
    g = ScanGeometry(600.0, 400.0, 7, 5, 0.2, 0.3, 57.0, 29.0, 4, 0.1, 3.0)
    return ProjectionStack(g, rng.random(g.shape).astype(np.float32))


def test_volume_round_trip_is_bitwise(tmp_path, vol):
    write_volume(tmp_path / "v.vol", vol)
    back = read_volume(tmp_path / "v.vol")
    assert back.grid == vol.grid
    assert back.values.tobytes() == vol.values.tobytes()


def test_volume_header_layout(tmp_path, vol):
    write_volume(tmp_path / "v.vol", vol)
    raw = (tmp_path / "v.vol").read_bytes()
    magic, version, nx, ny, nz = struct.unpack_from("<8sI3Q", raw)
    assert (magic, version, (nx, ny, nz)) == (b"TCBCTVOL", 1, GRID.dims)
    assert struct.unpack_from("<9d", raw, 36) == (*GRID.bbox_min, *GRID.bbox_max, *GRID.voxel)
    assert len(raw) == 36 + 72 + 4 * vol.values.size
    first = struct.unpack_from("<f", raw, 108)[0]
    assert first == vol.values[0, 0, 0]


def test_projection_round_trip_is_bitwise(tmp_path, stack):
    write_projections(tmp_path / "p.prj", stack)
    back = read_projections(tmp_path / "p.prj")
    assert back.geom == stack.geom
    assert back.data.tobytes() == stack.data.tobytes()


def test_float64_data_is_stored_as_float32(tmp_path, stack):
    p64 = ProjectionStack(stack.geom, stack.data.astype(np.float64) / 3)
    write_projections(tmp_path / "p.prj", p64)
    assert read_projections(tmp_path / "p.prj").data.tobytes() == p64.data.astype(np.float32).tobytes()


def test_projection_read_as_volume_is_bad_magic(tmp_path, stack):
    write_projections(tmp_path / "p.prj", stack)
    with pytest.raises(BadMagicError):
        read_volume(tmp_path / "p.prj")


def test_short_payload_is_truncated(tmp_path, vol):
    path = tmp_path / "v.vol"
    write_volume(path, vol)
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(TruncatedPayloadError):
        read_volume(path)


def test_long_payload_is_rejected(tmp_path, stack):
    path = tmp_path / "p.prj"
    write_projections(path, stack)
    path.write_bytes(path.read_bytes() + b"\0\0\0\0")
    with pytest.raises(TruncatedPayloadError):
        read_projections(path)


def test_header_only_file_is_truncated(tmp_path):
    path = tmp_path / "x.vol"
    path.write_bytes(b"TCBCTVOL")
    with pytest.raises(TruncatedPayloadError):
        read_volume(path)


def test_version_mismatch(tmp_path, vol):
    path = tmp_path / "v.vol"
    write_volume(path, vol)
    raw = bytearray(path.read_bytes())
    raw[8:12] = struct.pack("<I", 2)
    path.write_bytes(bytes(raw))
    with pytest.raises(VersionMismatchError):
        read_volume(path)


def test_errors_are_distinct():
    kinds = {BadMagicError, TruncatedPayloadError, VersionMismatchError}
    assert all(not issubclass(a, b) for a in kinds for b in kinds if a is not b)


def test_no_partial_file_left_behind(tmp_path, vol):
    write_volume(tmp_path / "v.vol", vol)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["v.vol"]


def test_checkpoint_round_trip(tmp_path):
    enc = HashGridConfig((-10.0, -5.0, 0.0), (10.0, 5.0, 7.5), levels=3, table_size=2 ** 8,
                         features=2, base_resolution=4, growth=1.7)
    m = InrModel.init(enc, MlpConfig(hidden_layers=3, width=8), seed=11)
    write_checkpoint(tmp_path / "m.inr", m)
    back = read_checkpoint(tmp_path / "m.inr")
    assert back.enc == m.enc and back.mlp == m.mlp
    assert len(back.arrays()) == len(m.arrays())
    for a, b in zip(m.arrays(), back.arrays()):
        assert a.shape == b.shape and a.tobytes() == b.tobytes()


def test_checkpoint_truncation_and_magic(tmp_path, vol):
    m = InrModel.init(HashGridConfig((0, 0, 0), (1, 1, 1), levels=2, table_size=64),
                      MlpConfig(width=4))
    path = tmp_path / "m.inr"
    write_checkpoint(path, m)
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(TruncatedPayloadError):
        read_checkpoint(path)
    write_volume(path, vol)
    with pytest.raises(BadMagicError):
        read_checkpoint(path)


# -- slices ---------------------------------------------------------------------

def test_window_examples():
    level, width = 0.02, 0.03
    px = window_to_u16(np.array([level, level - width / 2, level - 1.0, level + width / 2, 5.0]),
                       level, width)
    assert list(px) == [32768, 0, 0, 65535, 65535]


def test_window_width_must_be_positive():
    with pytest.raises(ConfigError):
        window_to_u16(np.zeros(2), 0.0, 0.0)


def test_uniform_volume_exports_midpoint(tmp_path):
    # 0.03125 is exact in float32, so the stored value equals the level
    v = Volume(GRID, np.full(GRID.shape, 0.03125, np.float32))
    export_slice(v, "axial", 2, 0.03125, 0.01, tmp_path / "a.pgm")
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw.startswith(b"P5\n8 4\n65535\n")
    img = read_pgm(tmp_path / "a.pgm")
    assert img.shape == (4, 8) and np.all(img == 32768)


def test_slice_orientation():
    vals = np.zeros(GRID.shape, np.float32)  # (z=6, y=4, x=8)
    vals[5, 1, 7] = 1.0  # top z, second y row, last x
    v = Volume(GRID, vals)
    assert slice_plane(v, "axial", 5)[1, 7] == 1.0
    assert slice_plane(v, "sagittal", 7).shape == (6, 4)
    assert slice_plane(v, "sagittal", 7)[0, 1] == 1.0
    assert slice_plane(v, "coronal", 1).shape == (6, 8)
    assert slice_plane(v, "coronal", 1)[0, 7] == 1.0


@pytest.mark.parametrize("axis,index", [("axial", 6), ("sagittal", -1), ("coronal", 4)])
def test_slice_index_out_of_range(axis, index, vol):
    with pytest.raises(IndexError):
        slice_plane(vol, axis, index)


def test_unknown_axis(vol):
    with pytest.raises(ConfigError):
        slice_plane(vol, "oblique", 0)


def test_repeat_export_is_bitwise_identical(tmp_path, vol):
    export_slice(vol, "coronal", 2, 0.0, 2.0, tmp_path / "a.pgm")
    export_slice(vol, "coronal", 2, 0.0, 2.0, tmp_path / "b.pgm")
    assert (tmp_path / "a.pgm").read_bytes() == (tmp_path / "b.pgm").read_bytes()


def test_pgm_reader_rejects_other_formats(tmp_path):
    (tmp_path / "x.pgm").write_bytes(b"P2\n1 1\n255\n0\n")
    with pytest.raises(BadMagicError):
        read_pgm(tmp_path / "x.pgm")
