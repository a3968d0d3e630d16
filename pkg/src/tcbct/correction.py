"""Two-grid truncation correction.

Stage 1 reconstructs a coarse prior over the extended box, zeroes it inside
the fine box, and subtracts its forward projection from the measurements.
Stage 2 runs SQS on the fine box against the corrected projections.

The prior is projected with a projector built on the coarse extended grid;
the fine reconstruction uses a second projector on the fine grid.  Both
share the scan geometry.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import inr
from .errors import ConfigError, GeometryMismatchError, TcbctError
from .fdk import FilterSpec, fdk_array
from .geometry import VolumeGrid
from .projector import ProjectionStack, Projector, Volume
from .sqs import Objective, SqsConfig, solve

log = logging.getLogger(__name__)

PRIOR_KINDS = ("none", "fdk", "sqs_coarse", "inr")
STAGES = ("prior", "mask", "correct", "reconstruct")


@dataclass(frozen=True)
class PipelineConfig:
    coarse_grid: VolumeGrid
    fine_grid: VolumeGrid
    prior_kind: str = "inr"
    encoding: dict = field(default_factory=dict)  # HashGridConfig overrides
    mlp: inr.MlpConfig = field(default_factory=inr.MlpConfig)
    train: inr.TrainConfig = field(default_factory=inr.TrainConfig)
    model_seed: int = 0
    sqs_coarse: SqsConfig = field(default_factory=lambda: SqsConfig(n_iters=30))
    sqs_fine: SqsConfig = field(default_factory=SqsConfig)
    fdk_filter: FilterSpec = field(default_factory=FilterSpec)

    def __post_init__(self):
        if self.prior_kind not in PRIOR_KINDS:
            raise ConfigError(f"prior kind must be one of {PRIOR_KINDS}, got {self.prior_kind!r}")
        if not self.coarse_grid.contains(self.fine_grid):
            raise ConfigError("fine grid must lie inside the coarse grid")
        if any(c < f for c, f in zip(self.coarse_grid.voxel, self.fine_grid.voxel)):
            raise ConfigError("coarse voxels must not be smaller than fine voxels")


@dataclass
class PipelineReport:
    prior_kind: str
    timings: dict[str, float] = field(default_factory=dict)
    fine_trace: list[Objective] = field(default_factory=list)
    coarse_trace: list[Objective] = field(default_factory=list)
    inr_losses: list[float] = field(default_factory=list)
    prior: Volume | None = None
    masked_prior: Volume | None = None
    model: inr.InrModel | None = None
    failed_stage: str | None = None


class PipelineError(TcbctError):
    """A pipeline stage failed; ``stage`` names it and ``report`` holds partial results."""

    def __init__(self, stage: str, report: PipelineReport, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.report = report


def inside_mask(grid: VolumeGrid, omega: VolumeGrid) -> np.ndarray:
    """Voxels of ``grid`` whose centers lie in ``omega``'s box (closed)."""
    x, y, z = grid.center_coords()
    lo, hi = omega.bbox_min, omega.bbox_max
    return ((x >= lo[0]) & (x <= hi[0]) & (y >= lo[1]) & (y <= hi[1])
            & (z >= lo[2]) & (z <= hi[2]))


def mask_prior(u_prior: Volume, omega: VolumeGrid) -> Volume:
    """Zero every coarse voxel whose center lies inside ``omega``."""
    vals = np.where(inside_mask(u_prior.grid, omega), 0, u_prior.values).astype(u_prior.values.dtype)
    return Volume(u_prior.grid, vals)


def correct_projections(p: ProjectionStack, u_masked: Volume) -> ProjectionStack:
    """``p - A u_masked`` with ``A`` on the masked prior's own (coarse) grid.

    The projection of the prior is rounded to float32, as ``forward_project``
    returns it, and the difference is kept in float64 so that adding the same
    projection back restores ``p`` exactly.
    """
    if p.data.shape != p.geom.shape:
        raise GeometryMismatchError("projection data do not match their geometry")
    proj = Projector(p.geom, u_masked.grid).forward(u_masked.values).astype(np.float32)
    return ProjectionStack(p.geom, p.data.astype(np.float64) - proj.astype(np.float64))


def build_prior(p: ProjectionStack, cfg: PipelineConfig, report: PipelineReport) -> Volume:
    grid = cfg.coarse_grid
    if cfg.prior_kind == "fdk":
        vals = fdk_array(p.data, p.geom, grid, cfg.fdk_filter)
    elif cfg.prior_kind == "sqs_coarse":
        vals, report.coarse_trace = solve(p.data, Projector(p.geom, grid), cfg.sqs_coarse)
    elif cfg.prior_kind == "inr":
        enc = inr.default_encoding(grid, **cfg.encoding)
        model = inr.InrModel.init(enc, cfg.mlp, seed=cfg.model_seed)
        report.model, report.inr_losses = inr.train(model, p, p.geom, cfg.train)
        return inr.render_volume(report.model, grid)
    else:
        raise ConfigError(f"no prior for kind {cfg.prior_kind!r}")
    # attenuation is nonnegative
    return Volume(grid, np.maximum(vals, 0.0).astype(np.float32))


def run_pipeline(p: ProjectionStack, cfg: PipelineConfig) -> tuple[Volume, PipelineReport]:
    report = PipelineReport(cfg.prior_kind)
    p_hat = p
    stage = "prior"
    try:
        if cfg.prior_kind != "none":
            t = time.perf_counter()
            report.prior = build_prior(p, cfg, report)
            report.timings["prior"] = time.perf_counter() - t

            stage = "mask"
            t = time.perf_counter()
            report.masked_prior = mask_prior(report.prior, cfg.fine_grid)
            report.timings["mask"] = time.perf_counter() - t

            stage = "correct"
            t = time.perf_counter()
            p_hat = correct_projections(p, report.masked_prior)
            report.timings["correct"] = time.perf_counter() - t
            log.info("prior %s ready in %.1f s", cfg.prior_kind, report.timings["prior"])

        stage = "reconstruct"
        t = time.perf_counter()
        x0 = None
        if cfg.sqs_fine.init == "fdk":
            x0 = fdk_array(p_hat.data, p.geom, cfg.fine_grid, cfg.fdk_filter)
        x, report.fine_trace = solve(p_hat.data, Projector(p.geom, cfg.fine_grid), cfg.sqs_fine, x0=x0)
        report.timings["reconstruct"] = time.perf_counter() - t
    except Exception as exc:
        report.failed_stage = stage
        raise PipelineError(stage, report, exc) from exc
    return Volume(cfg.fine_grid, x.astype(np.float32)), report
