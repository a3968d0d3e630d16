from dataclasses import replace

import numpy as np
import pytest

from conftest import DESK_COARSE, DESK_FINE, DESK_GEOMETRY
from tcbct import correction
from tcbct.errors import ConfigError, DivergenceError
from tcbct.correction import (PipelineConfig, PipelineError, correct_projections, inside_mask,
                              mask_prior, run_pipeline)
from tcbct.geometry import ScanGeometry, VolumeGrid
from tcbct.inr import MlpConfig, TrainConfig
from tcbct.phantom import Ellipsoid, Phantom, voxelize
from tcbct.projector import ProjectionStack, Projector, Volume, forward_project, simulate_projections
from tcbct.sqs import SqsConfig, solve

FULL_COARSE = VolumeGrid((-140, -80, -40), (140, 200, 105), (1, 1, 1))
FULL_FINE = VolumeGrid((-80, -80, -32), (80, 80, 88), (0.2, 0.2, 0.2))

# small two-grid setup for pipeline runs
GEOM = ScanGeometry(300.0, 200.0, 24, 16, 1.5, 1.5, 4.0, 0.0, 36)
COARSE = VolumeGrid((-24, -24, -12), (24, 24, 12), (3, 3, 3))
FINE = VolumeGrid((-12, -12, -6), (12, 12, 6), (1.5, 1.5, 1.5))


def _pipeline_cfg(kind, **kw):
    return PipelineConfig(COARSE, FINE, prior_kind=kind,
                          encoding=dict(levels=3, table_size=2 ** 10, base_resolution=4),
                          mlp=MlpConfig(width=8),
                          train=TrainConfig(rays_per_batch=64, steps=20, sample_step=3.0),
                          sqs_coarse=SqsConfig(n_iters=5), sqs_fine=SqsConfig(n_iters=8), **kw)


def _wide_scan():
    ph = Phantom((Ellipsoid((0, 0, 0), (20, 16, 10), density=0.02),
                  Ellipsoid((3, 2, 0), (4, 4, 4), density=0.01)))
    return simulate_projections(ph, GEOM)


# -- masking -----------------------------------------------------------------

def test_full_scale_masked_fraction():
    m = inside_mask(FULL_COARSE, FULL_FINE)
    assert m.sum() == 160 * 160 * 120
    assert m.mean() == pytest.approx(160 * 160 * 120 / (280 * 280 * 145), rel=1e-12)
    assert m.mean() == pytest.approx(0.27, abs=0.005)


def test_mask_whole_box_gives_zero(rng):
    u = Volume(COARSE, rng.random(COARSE.shape))
    assert not mask_prior(u, COARSE).values.any()


def test_mask_outside_box_is_identity(rng):
    u = Volume(COARSE, rng.random(COARSE.shape))
    far = VolumeGrid((100, 100, 100), (110, 110, 110), (5, 5, 5))
    assert mask_prior(u, far).values.tobytes() == u.values.tobytes()


def test_mask_is_idempotent_and_local(rng):
    u = Volume(COARSE, rng.random(COARSE.shape))
    once = mask_prior(u, FINE)
    assert mask_prior(once, FINE).values.tobytes() == once.values.tobytes()
    inside = inside_mask(COARSE, FINE)
    assert not once.values[inside].any()
    np.testing.assert_array_equal(once.values[~inside], u.values[~inside])


# -- projection correction -----------------------------------------------------

def test_zero_prior_leaves_projections_unchanged(small_geom):
    p = ProjectionStack(small_geom, np.random.default_rng(0).random(small_geom.shape))
    out = correct_projections(p, Volume.zeros(COARSE))
    assert out.data.tobytes() == p.data.astype(np.float64).tobytes()


def test_interior_only_prior_masks_to_no_correction(rng):
    vals = np.where(inside_mask(COARSE, FINE), 0.02, 0.0)
    masked = mask_prior(Volume(COARSE, vals), FINE)
    p = _wide_scan()
    assert correct_projections(p, masked).data.tobytes() == p.data.astype(np.float64).tobytes()


def test_correction_is_linear_in_prior(rng):
    p = _wide_scan()
    a = Volume(COARSE, rng.random(COARSE.shape) * 0.01)
    b = Volume(COARSE, rng.random(COARSE.shape) * 0.01)
    ab = Volume(COARSE, a.values.astype(np.float64) + b.values)
    lhs = correct_projections(p, ab).data
    rhs = correct_projections(p, a).data + correct_projections(p, b).data - p.data
    # each projection is rounded to float32 once
    assert np.abs(lhs - rhs).max() <= 1e-6 * np.abs(lhs).max()


def test_correction_conserves_measurements_bitwise(rng):
    p = _wide_scan()
    u = Volume(COARSE, rng.random(COARSE.shape) * 0.01)
    p_hat = correct_projections(p, u)
    back = p_hat.data + forward_project(u, GEOM).data.astype(np.float64)
    assert back.tobytes() == p.data.astype(np.float64).tobytes()


def test_exterior_phantom_is_removed_at_desk_scale():
    ph = Phantom((Ellipsoid((-85, 40, 20), (15, 20, 25), density=0.02),
                  Ellipsoid((88, 60, 10), (12, 12, 30), density=0.015),
                  Ellipsoid((0, 110, 25), (25, 20, 15), density=0.01)))
    assert not voxelize(ph, DESK_FINE, 1).values.any()
    p = simulate_projections(ph, DESK_GEOMETRY)
    u = mask_prior(voxelize(ph, DESK_COARSE, 3), DESK_FINE)
    p_hat = correct_projections(p, u)
    assert np.linalg.norm(p_hat.data) / np.linalg.norm(p.data) < 0.1


# -- configuration ---------------------------------------------------------------

def test_fine_grid_must_sit_inside_coarse():
    with pytest.raises(ConfigError):
        PipelineConfig(FINE, COARSE)
    with pytest.raises(ConfigError):
        PipelineConfig(COARSE, VolumeGrid((0, 0, 0), (30, 3, 3), (1.5, 1.5, 1.5)))


def test_coarse_voxels_not_smaller_than_fine():
    with pytest.raises(ConfigError):
        PipelineConfig(VolumeGrid((-24, -24, -12), (24, 24, 12), (1, 1, 1)), FINE)


def test_unknown_prior_kind():
    with pytest.raises(ConfigError):
        PipelineConfig(COARSE, FINE, prior_kind="wavelet")


# -- pipeline ---------------------------------------------------------------------

def test_no_prior_equals_plain_solver():
    p = _wide_scan()
    vol, rep = run_pipeline(p, _pipeline_cfg("none"))
    x, _ = solve(p.data, Projector(GEOM, FINE), SqsConfig(n_iters=8))
    assert vol.values.tobytes() == x.astype(np.float32).tobytes()
    assert set(rep.timings) == {"reconstruct"} and rep.prior is None


@pytest.mark.parametrize("kind", ["fdk", "sqs_coarse", "inr"])
def test_prior_pipelines_report_every_stage(kind):
    vol, rep = run_pipeline(_wide_scan(), _pipeline_cfg(kind))
    assert set(rep.timings) == {"prior", "mask", "correct", "reconstruct"}
    assert rep.prior.grid == COARSE and rep.masked_prior.grid == COARSE
    assert vol.grid == FINE and np.all(vol.values >= 0)
    assert len(rep.fine_trace) == 9
    if kind == "inr":
        assert len(rep.inr_losses) == 20 and rep.model is not None
    if kind == "sqs_coarse":
        assert len(rep.coarse_trace) == 6


def test_inr_pipeline_is_bitwise_reproducible():
    p = _wide_scan()
    a, ra = run_pipeline(p, _pipeline_cfg("inr"))
    b, rb = run_pipeline(p, _pipeline_cfg("inr"))
    assert a.values.tobytes() == b.values.tobytes()
    assert ra.inr_losses == rb.inr_losses
    assert [o.total for o in ra.fine_trace] == [o.total for o in rb.fine_trace]


def test_untruncated_object_prior_barely_matters():
    ph = Phantom((Ellipsoid((1, 0, 0), (9, 8, 4), density=0.02),))
    p = simulate_projections(ph, GEOM)
    none, _ = run_pipeline(p, _pipeline_cfg("none"))
    # a converged coarse prior holds no mass outside the fine box
    cfg = replace(_pipeline_cfg("sqs_coarse"), sqs_coarse=SqsConfig(n_iters=50))
    sqs, _ = run_pipeline(p, cfg)
    diff = np.sqrt(np.mean((sqs.values - none.values) ** 2))
    assert diff < 0.02 * np.sqrt(np.mean(none.values ** 2))


def test_failed_stage_is_attributed(monkeypatch):
    def boom(*a, **k):
        raise DivergenceError("loss exploded")

    monkeypatch.setattr(correction.inr, "train", boom)
    with pytest.raises(PipelineError) as info:
        run_pipeline(_wide_scan(), _pipeline_cfg("inr"))
    assert info.value.stage == "prior"
    assert info.value.report.failed_stage == "prior"
    assert isinstance(info.value.__cause__, DivergenceError)
