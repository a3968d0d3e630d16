"""Report figures: side-by-side slices under one display window, and convergence traces."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .io import slice_plane  # noqa: E402
from .projector import Volume  # noqa: E402


def comparison_figure(volumes: dict[str, Volume], path, level: float, width: float,
                      axes=("axial", "sagittal"), index: dict[str, int] | None = None) -> Path:
    """Grid of slices (rows: orientations, columns: volumes) sharing one window."""
    names = list(volumes)
    fig, grid = plt.subplots(len(axes), len(names), figsize=(2.6 * len(names), 2.6 * len(axes)),
                             squeeze=False)
    lo, hi = level - width / 2, level + width / 2
    for r, axis in enumerate(axes):
        for c, name in enumerate(names):
            vol = volumes[name]
            n = {"axial": vol.grid.shape[0], "sagittal": vol.grid.shape[2],
                 "coronal": vol.grid.shape[1]}[axis]
            k = (index or {}).get(axis, n // 2)
            ax = grid[r, c]
            ax.imshow(slice_plane(vol, axis, k), cmap="gray", vmin=lo, vmax=hi,
                      interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if r == 0:
                ax.set_title(name, fontsize=9)
            if c == 0:
                ax.set_ylabel(axis, fontsize=9)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def trace_figure(traces: dict[str, np.ndarray], path, ylabel: str, logy: bool = True) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for name, ys in traces.items():
        ys = np.asarray(ys, dtype=float)
        if ys.size:
            ax.plot(np.arange(ys.size), ys, label=name, lw=1.2)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel(ylabel)
    if len(traces) > 1:
        ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
