"""Figure and CSV rendering for the reporting path.

All writers target files (Agg backend) and are deterministic so report
output can be byte-compared across reruns.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .core import DepthMap, PointCloud
from .visibility import VisibilityGrid

__all__ = [
    "save_metrics_csv", "save_depth_figure", "save_mask_figure",
    "save_grid_slices_figure", "save_scores_figure", "save_cloud_figure",
]

_SAVEFIG = dict(dpi=110, bbox_inches="tight",
                metadata={"Software": "planescene"})


def save_metrics_csv(path, rows: Sequence[Mapping]) -> None:
    """Delimited metrics output; one row per record, union of keys."""
    keys: list[str] = []
    for row in rows:
        for k in row:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in keys})


def save_depth_figure(path, depth: DepthMap, title: str = "depth") -> None:
    values = np.where(depth.validity, depth.values, np.nan)
    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(values, cmap="viridis")
    ax.set_title(title)
    ax.set_axis_off()
    fig.colorbar(im, ax=ax, fraction=0.046, label="depth [m]")
    fig.savefig(path, **_SAVEFIG)
    plt.close(fig)


def save_mask_figure(path, mask: np.ndarray, title: str = "mask") -> None:
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.imshow(np.asarray(mask, dtype=float), cmap="gray", vmin=0, vmax=1)
    ax.set_title(title)
    ax.set_axis_off()
    fig.savefig(path, **_SAVEFIG)
    plt.close(fig)


def save_grid_slices_figure(path, grid: VisibilityGrid,
                            n_slices: int = 4) -> None:
    """Horizontal slices (y levels) of the visibility grid."""
    ny = grid.dims[1]
    levels = np.unique(np.linspace(0, ny - 1, n_slices).astype(int))
    fig, axes = plt.subplots(1, len(levels),
                             figsize=(3 * len(levels), 3), squeeze=False)
    for ax, iy in zip(axes[0], levels):
        ax.imshow(grid.visible[:, iy, :].T, origin="lower", cmap="gray",
                  vmin=0, vmax=1)
        height = grid.origin[1] + (iy + 0.5) * grid.voxel_size
        ax.set_title(f"y = {height:.2f} m", fontsize=9)
        ax.set_xlabel("x voxel")
        ax.set_ylabel("z voxel")
    fig.suptitle("visible voxels per height slice")
    fig.savefig(path, **_SAVEFIG)
    plt.close(fig)


def save_scores_figure(path, proposals) -> None:
    """Bar chart of proposal scores with their component breakdown."""
    scored = [p for p in proposals if p.score is not None]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    if scored:
        idx = np.arange(len(scored))
        width = 0.28
        ax.bar(idx - width, [p.components.coverage for p in scored], width,
               label="coverage R")
        ax.bar(idx, [p.components.cos_theta for p in scored], width,
               label="|cos θ|")
        ax.bar(idx + width, [-p.components.distance for p in scored], width,
               label="-D")
        ax.plot(idx, [p.score for p in scored], "k.-", label="score")
        ax.set_xticks(idx)
        ax.set_xticklabels([f"p{p.target_plane_id}" for p in scored],
                           fontsize=8)
    ax.set_xlabel("proposal (target plane)")
    ax.set_ylabel("score terms")
    ax.legend(fontsize=8)
    fig.savefig(path, **_SAVEFIG)
    plt.close(fig)


def save_cloud_figure(path, cloud: PointCloud, title: str = "fused cloud",
                      max_points: int = 20000) -> None:
    """Top (x-z) and side (x-y) scatter projections of a point cloud."""
    pts = cloud.points
    if len(pts) > max_points:
        step = int(np.ceil(len(pts) / max_points))
        pts = pts[::step]
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    for ax, (a, b, la, lb) in zip(axes, [(0, 2, "x", "z"), (0, 1, "x", "y")]):
        ax.scatter(pts[:, a], pts[:, b], s=0.5, c=pts[:, 1], cmap="viridis")
        ax.set_xlabel(f"{la} [m]")
        ax.set_ylabel(f"{lb} [m]")
        ax.set_aspect("equal")
    fig.suptitle(title)
    fig.savefig(path, **_SAVEFIG)
    plt.close(fig)
