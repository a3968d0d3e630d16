"""Penalized least squares by separable quadratic surrogates.

Minimizes ``0.5 * ||A u - p||^2 + lam * R(u)`` where ``R`` is a Huber
penalty on 6-neighbor differences.  Each update minimizes a separable
majorizer of the objective, so the objective never increases.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DivergenceError, GeometryMismatchError
from .fdk import FilterSpec, fdk_array
from .geometry import VolumeGrid
from .projector import ProjectionStack, Projector, Volume

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SqsConfig:
    n_iters: int = 100
    lam: float = 0.0
    delta: float = 1e-3
    nonneg: bool = True
    init: str = "zero"

    def __post_init__(self):
        if self.n_iters < 0:
            raise ConfigError("n_iters must be >= 0")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if not self.delta > 0:
            raise ConfigError("huber delta must be > 0")
        if self.init not in ("zero", "fdk"):
            raise ConfigError(f"unknown init {self.init!r}")


@dataclass(frozen=True)
class Objective:
    data_term: float
    reg_term: float

    @property
    def total(self) -> float:
        return self.data_term + self.reg_term


def huber(t: np.ndarray, delta: float) -> np.ndarray:
    a = np.abs(t)
    return np.where(a <= delta, 0.5 * t * t, delta * a - 0.5 * delta * delta)


def huber_reg(u: np.ndarray, delta: float) -> tuple[float, np.ndarray]:
    """Huber roughness over 6-neighbor pairs (each pair once) and its gradient."""
    u = np.asarray(u, dtype=np.float64)
    value = 0.0
    grad = np.zeros_like(u)
    for axis in range(u.ndim):
        if u.shape[axis] < 2:
            continue
        hi = [slice(None)] * u.ndim
        lo = [slice(None)] * u.ndim
        hi[axis] = slice(1, None)
        lo[axis] = slice(None, -1)
        d = u[tuple(hi)] - u[tuple(lo)]
        value += float(huber(d, delta).sum())
        dpsi = np.clip(d, -delta, delta)
        grad[tuple(hi)] += dpsi
        grad[tuple(lo)] -= dpsi
    return value, grad


def neighbor_counts(shape: tuple[int, ...]) -> np.ndarray:
    counts = np.zeros(shape)
    for axis, n in enumerate(shape):
        if n < 2:
            continue
        hi = [slice(None)] * len(shape)
        lo = [slice(None)] * len(shape)
        hi[axis] = slice(1, None)
        lo[axis] = slice(None, -1)
        counts[tuple(hi)] += 1
        counts[tuple(lo)] += 1
    return counts


def reg_curvature(shape: tuple[int, ...]) -> np.ndarray:
    """Separable curvature of the Huber penalty.

    Huber curvature is at most 1, and each pair's Hessian ``[[1,-1],[-1,1]]``
    is majorized by ``diag(2, 2)``.
    """
    return 2.0 * neighbor_counts(shape)


def _step(u, grad, denom, nonneg):
    out = u.copy()
    live = denom > 0
    out[live] = u[live] - grad[live] / denom[live]
    if nonneg:
        np.maximum(out, 0.0, out=out)
    if not np.all(np.isfinite(out)):
        raise DivergenceError("non-finite values in SQS update")
    return out


def sqs_step(u: Volume, p_hat: ProjectionStack, w: Volume, cfg: SqsConfig,
             projector: Projector | None = None) -> Volume:
    if u.grid != w.grid:
        raise GeometryMismatchError("weights and image live on different grids")
    A = projector or Projector(p_hat.geom, u.grid)
    x = u.values.astype(np.float64)
    grad = A.back(A.forward(x) - p_hat.data)
    denom = w.values.astype(np.float64)
    if cfg.lam > 0:
        grad += cfg.lam * huber_reg(x, cfg.delta)[1]
        denom = denom + cfg.lam * reg_curvature(x.shape)
    return Volume(u.grid, _step(x, grad, denom, cfg.nonneg))


def solve(p_hat: np.ndarray, A: Projector, cfg: SqsConfig, x0: np.ndarray | None = None,
          weights: np.ndarray | None = None, callback=None) -> tuple[np.ndarray, list[Objective]]:
    """Array-level SQS iterations; returns the float64 image and objective trace.

    The trace holds the objective of the initial image and of every iterate.
    """
    p_hat = np.asarray(p_hat, dtype=np.float64)
    shape = A.grid.shape
    if x0 is None:
        x = np.zeros(shape)
    else:
        x = np.array(x0, dtype=np.float64)
        if cfg.nonneg:
            np.maximum(x, 0.0, out=x)
    if cfg.n_iters == 0 and x0 is None:
        return x, [Objective(0.5 * float(np.dot(p_hat.ravel(), p_hat.ravel())), 0.0)]
    denom = A.weights() if weights is None else np.asarray(weights, dtype=np.float64)
    if cfg.lam > 0:
        denom = denom + cfg.lam * reg_curvature(shape)
    trace = []
    resid = A.forward(x) - p_hat
    for it in range(cfg.n_iters + 1):
        data = 0.5 * float(np.dot(resid.ravel(), resid.ravel()))
        if cfg.lam > 0:
            rval, rgrad = huber_reg(x, cfg.delta)
        else:
            rval, rgrad = 0.0, None
        obj = Objective(data, cfg.lam * rval)
        if not np.isfinite(obj.total):
            raise DivergenceError(f"objective became non-finite at iteration {it}")
        trace.append(obj)
        if callback is not None:
            callback(it, x, obj)
        if it == cfg.n_iters:
            break
        grad = A.back(resid)
        if rgrad is not None:
            grad += cfg.lam * rgrad
        x = _step(x, grad, denom, cfg.nonneg)
        resid = A.forward(x) - p_hat
        log.debug("sqs iter %d objective %.9g", it + 1, obj.total)
    return x, trace


def sqs_reconstruct(p_hat: ProjectionStack, grid: VolumeGrid, cfg: SqsConfig,
                    filt: FilterSpec | None = None) -> tuple[Volume, list[Objective]]:
    A = Projector(p_hat.geom, grid)
    x0 = None
    if cfg.init == "fdk":
        x0 = fdk_array(p_hat.data, p_hat.geom, grid, filt or FilterSpec())
    x, trace = solve(p_hat.data, A, cfg, x0=x0)
    return Volume(grid, x.astype(np.float32)), trace
