import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tcbct.errors import ConfigError
from tcbct.geometry import Ray, VolumeGrid
from tcbct.phantom import (Ellipsoid, Phantom, analytic_line_integral, builtin_head_phantom,
                           format_phantom, parse_phantom, sample_density, segment_integrals,
                           voxelize)

FULL_COARSE = VolumeGrid((-140, -80, -40), (140, 200, 105), (1, 1, 1))


def sphere(c, r, rho, clips=()):
    return Ellipsoid(tuple(c), (r, r, r), density=rho, clips=tuple(clips))


def breakpoint_integral(ph, origin, direction, t0, t1, probe=0.01):
    """Piecewise-constant integration: find every density jump by probing and
    bisection, then sum density x length over the constant pieces."""
    o, d = np.asarray(origin, float), np.asarray(direction, float)
    ts = np.arange(t0, t1, probe)
    ts = np.append(ts, t1)
    vals = sample_density(ph, o + ts[:, None] * d)
    cuts = [t0]
    for i in np.nonzero(np.diff(vals))[0]:
        a, b = ts[i], ts[i + 1]
        va = vals[i]
        for _ in range(60):
            m = 0.5 * (a + b)
            if sample_density(ph, o + m * d) == va:
                a = m
            else:
                b = m
        cuts.append(0.5 * (a + b))
    cuts.append(t1)
    cuts = np.array(cuts)
    mids = 0.5 * (cuts[1:] + cuts[:-1])
    return float(np.sum(sample_density(ph, o + mids[:, None] * d) * np.diff(cuts)))


def test_empty_phantom_density_is_zero():
    assert sample_density(Phantom(), (1.0, 2.0, 3.0)) == 0.0


def test_unit_sphere_center():
    assert sample_density(Phantom((sphere((0, 0, 0), 1, 1.0),)), (0, 0, 0)) == 1.0


def test_additive_overlap():
    ph = Phantom((sphere((0, 0, 0), 2, 1.0), sphere((1, 0, 0), 2, -0.5)))
    assert sample_density(ph, (0.5, 0, 0)) == pytest.approx(0.5)


def test_clip_removes_half():
    e = sphere((0, 0, 0), 5, 1.0, clips=[(0, 1, 0, 0.0)])
    ph = Phantom((e,))
    assert sample_density(ph, (0, -1, 0)) == 1.0
    assert sample_density(ph, (0, 1, 0)) == 0.0


def test_rejects_bad_primitives():
    with pytest.raises(ConfigError):
        Ellipsoid((0, 0, 0), (1, 0, 1))
    with pytest.raises(ConfigError):
        Ellipsoid((0, 0, 0), (1, 1, 1), clips=((1, 1, 0, 0),))


def test_diameter_chord():
    ph = Phantom((sphere((3, -2, 1), 7.5, 0.02),))
    ray = Ray((-100.0, -2.0, 1.0), (1.0, 0.0, 0.0), 0.0, 300.0)
    assert analytic_line_integral(ph, ray) == pytest.approx(2 * 7.5 * 0.02, rel=1e-12)


def test_ray_missing_everything():
    ph = builtin_head_phantom()
    ray = Ray((0.0, 0.0, 500.0), (1.0, 0.0, 0.0), -1000.0, 1000.0)
    assert analytic_line_integral(ph, ray) == 0.0


def test_off_center_chord_matches_dense_sampling():
    e = Ellipsoid((1.0, 2.0, -1.0), (10.0, 6.0, 4.0), density=0.7)
    ph = Phantom((e,))
    o, d = np.array([-30.0, 4.0, 0.5]), np.array([1.0, 0.0, 0.0])
    ray = Ray(tuple(o), tuple(d), 0.0, 60.0)
    step = 1e-3 * 4.0
    ts = np.arange(0, 60, step) + step / 2
    dense = np.sum(sample_density(ph, o + ts[:, None] * d)) * step
    exact = analytic_line_integral(ph, ray)
    closed = 2 * 0.7 * 10.0 * math.sqrt(1 - (2 / 6) ** 2 - (1.5 / 4) ** 2)
    assert exact == pytest.approx(closed, rel=1e-12)
    assert dense == pytest.approx(exact, rel=1e-3)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_builtin_line_integrals_match_breakpoint_oracle(seed):
    r = np.random.default_rng(seed)
    ph = builtin_head_phantom()
    a = r.uniform(0, 2 * math.pi)
    origin = np.array([400 * math.cos(a), 400 * math.sin(a), r.uniform(-20, 80)])
    target = r.uniform([-90, -60, -30], [90, 180, 95])
    d = (target - origin) / np.linalg.norm(target - origin)
    ray = Ray(tuple(origin), tuple(d), 100.0, 700.0)
    exact = analytic_line_integral(ph, ray)
    oracle = breakpoint_integral(ph, origin, d, 100.0, 700.0)
    assert exact == pytest.approx(oracle, rel=1e-6, abs=1e-9)


def test_clipped_mandible_line_integral():
    ph = builtin_head_phantom()
    mandible = Phantom((ph.ellipsoids[2],))
    o = np.array([0.0, -60.0, -25.0])
    d = np.array([0.0, 1.0, 0.0])
    ray = Ray(tuple(o), tuple(d), 0.0, 200.0)
    # chord spans y in [-35, 25] before the clip at y = 5
    assert analytic_line_integral(mandible, ray) == pytest.approx(0.020 * 40.0, rel=1e-12)


@settings(max_examples=20, deadline=None)
@given(delta=st.floats(-math.pi, math.pi), seed=st.integers(0, 1000))
def test_rotation_invariance(delta, seed):
    r = np.random.default_rng(seed)
    ph = builtin_head_phantom()
    c, s = math.cos(delta), math.sin(delta)
    rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    rotated = Phantom(tuple(
        Ellipsoid(tuple(rot @ np.asarray(e.center)), e.semi_axes,
                  (e.rotation[0] + delta, e.rotation[1], e.rotation[2]), e.density,
                  tuple((*(rot @ np.asarray(cl[:3])), cl[3]) for cl in e.clips))
        for e in ph.ellipsoids))
    o = r.uniform(-300, 300, 3)
    tgt = r.uniform([-60, -40, -20], [60, 150, 80])
    d = (tgt - o) / np.linalg.norm(tgt - o)
    a = analytic_line_integral(ph, Ray(tuple(o), tuple(d), 0.0, 800.0))
    b = analytic_line_integral(rotated, Ray(tuple(rot @ o), tuple(rot @ d), 0.0, 800.0))
    assert b == pytest.approx(a, rel=1e-9, abs=1e-12)


def test_segment_integrals_respect_limits():
    ph = Phantom((sphere((0, 0, 0), 10, 1.0),))
    o = np.array([[-50.0, 0.0, 0.0]])
    d = np.array([[1.0, 0.0, 0.0]])
    assert segment_integrals(ph, o, d, [45.0], [52.0])[0] == pytest.approx(7.0)
    assert segment_integrals(ph, o, d, [0.0], [30.0])[0] == 0.0


# -- voxelization ----------------------------------------------------------------

def test_voxelize_empty_and_full():
    g = VolumeGrid((-2, -2, -2), (2, 2, 2), (1, 1, 1))
    assert not voxelize(Phantom(), g, 2).values.any()
    full = voxelize(Phantom((sphere((0, 0, 0), 100, 0.3),)), g, 3)
    np.testing.assert_allclose(full.values, 0.3, rtol=1e-6)
    assert full.values.dtype == np.float32


def test_voxelize_supersample_convergence():
    g = VolumeGrid((-4, -4, -4), (4, 4, 4), (1, 1, 1))
    ph = Phantom((sphere((0.5, 0.0, 0.0), 2.3, 1.0),))
    v4 = voxelize(ph, g, 4).values
    v8 = voxelize(ph, g, 8).values
    assert np.abs(v4 - v8).max() < 0.1


def test_voxelize_interior_trilinear_resampling():
    from scipy.ndimage import map_coordinates

    g = VolumeGrid((-20, -20, -20), (20, 20, 20), (1, 1, 1))
    ph = Phantom((sphere((0, 0, 0), 15, 0.02), sphere((5, 0, 0), 3, 0.01)))
    vol = voxelize(ph, g, 2).values
    pts = np.array([[-5.2, 3.3, 1.1], [0.4, -7.7, 2.0], [-2.0, 6.1, -6.5]])
    idx = (pts - np.array(g.bbox_min)) / 1.0 - 0.5
    got = map_coordinates(vol.astype(np.float64), idx[:, ::-1].T, order=1)
    np.testing.assert_allclose(got, sample_density(ph, pts), atol=1e-6)


# -- builtin phantom --------------------------------------------------------------

def test_builtin_structure():
    ph = builtin_head_phantom()
    assert len(ph.ellipsoids) >= 8
    assert any(e.clips for e in ph.ellipsoids)
    brain = sample_density(ph, (0.0, 0.0, 0.0))
    assert brain == pytest.approx(0.020)
    low = [e for e in ph.ellipsoids if abs(e.density) <= 0.01 * brain]
    assert len(low) >= 2


def test_builtin_outside_shell_is_zero():
    ph = builtin_head_phantom()
    assert sample_density(ph, (0.0, 60.0, 32.0 + 71.0)) == 0.0
    assert sample_density(ph, (101.0, 60.0, 32.0)) == 0.0


def test_builtin_extent_fits_coarse_and_overflows_fine():
    lo, hi = builtin_head_phantom().bounds
    assert np.all(lo >= np.array(FULL_COARSE.bbox_min))
    assert np.all(hi <= np.array(FULL_COARSE.bbox_max))
    assert hi[0] > 80.0 and -lo[0] > 80.0


def test_format_parse_round_trip():
    ph = builtin_head_phantom()
    again = parse_phantom(format_phantom(ph))
    assert again == ph


@pytest.mark.parametrize("text", ["sphere 0 0 0 1", "ellipsoid 0 0 0 1 1 1 0 0 0",
                                  "ellipsoid 0 0 0 1 1 1 0 0 0 1 clip 0 1 0",
                                  "ellipsoid 0 0 0 1 1 x 0 0 0 1"])
def test_parse_errors(text):
    with pytest.raises(ConfigError):
        parse_phantom(text)
