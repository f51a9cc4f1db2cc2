"""Single-source color supervision assignment across views.

Every pixel of every (possibly inpainted) view gets exactly one source
view: planar pixels defer to the view observing their plane most
completely, non-planar pixels to the first view (in training order) whose
depth confirms the correspondence.  This removes cross-view conflicts when
training on multi-view inconsistent inpainted imagery.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .core import Camera, DepthMap, backproject_depth, project_points
from .errors import ShapeError
from .plane_depth import SOURCE_ALIGNED_MONO, SOURCE_PLANE_BASE, PlaneAwareDepth
from .planes import GlobalPlane

__all__ = [
    "UNASSIGNED", "REGION_UNASSIGNED", "REGION_NONPLANAR", "REGION_PLANE_BASE",
    "SupervisionMap", "best_view_per_plane", "build_supervision_map",
]

logger = logging.getLogger(__name__)

UNASSIGNED = -1
REGION_UNASSIGNED = 0
REGION_NONPLANAR = 1
REGION_PLANE_BASE = 1000


@dataclass(frozen=True)
class SupervisionMap:
    """Per-pixel source-view assignment for one view.

    ``source_view`` holds view ids (-1 = unassigned, i.e. self-supervised);
    ``region_kind`` uses 0 = unassigned, 1 = non-planar, 1000 + plane id for
    planar pixels.
    """

    view_id: int
    source_view: np.ndarray
    region_kind: np.ndarray

    def __post_init__(self) -> None:
        src = np.asarray(self.source_view, dtype=np.int64)
        kind = np.asarray(self.region_kind, dtype=np.int64)
        if src.shape != kind.shape:
            raise ShapeError("source and region rasters must match")
        src.setflags(write=False)
        kind.setflags(write=False)
        object.__setattr__(self, "source_view", src)
        object.__setattr__(self, "region_kind", kind)


def _observation_ok(camera: Camera, depth: DepthMap, points: np.ndarray,
                    depth_tol_rel: float) -> np.ndarray:
    """True per point when the view observes it: in-bounds projection whose
    depth matches the view's depth map within the relative tolerance."""
    uv, z = project_points(camera, points)
    ok = z > 0
    px = np.zeros(len(points), dtype=np.int64)
    py = np.zeros(len(points), dtype=np.int64)
    px[ok] = np.rint(uv[ok, 0]).astype(np.int64)
    py[ok] = np.rint(uv[ok, 1]).astype(np.int64)
    ok &= (px >= 0) & (px <= camera.width - 1) & \
          (py >= 0) & (py <= camera.height - 1)
    pxc = np.clip(px, 0, camera.width - 1)
    pyc = np.clip(py, 0, camera.height - 1)
    rendered = depth.values[pyc, pxc]
    ok &= depth.validity[pyc, pxc]
    ok &= np.abs(z - rendered) <= depth_tol_rel * rendered
    return ok


def best_view_per_plane(planes: Sequence[GlobalPlane],
                        cameras: Mapping[int, Camera],
                        depths: Mapping[int, DepthMap],
                        depth_tol_rel: float = 0.01) -> dict[int, int]:
    """The view observing each plane most completely.

    Counts support points passing the observation test per view; ties break
    toward the lower view id (training order puts input views before
    generated ones).  Planes observed by no view are skipped with a
    warning.
    """
    winners: dict[int, int] = {}
    view_ids = sorted(cameras.keys())
    for plane in planes:
        pts = plane.support.points
        if len(pts) == 0:
            logger.warning("plane %d has no support points, skipped", plane.id)
            continue
        best_count, best_view = 0, None
        for v in view_ids:
            count = int(_observation_ok(cameras[v], depths[v], pts,
                                        depth_tol_rel).sum())
            if count > best_count:
                best_count, best_view = count, v
        if best_view is None:
            logger.warning("plane %d observed by no view, skipped", plane.id)
            continue
        winners[plane.id] = best_view
    return winners


def build_supervision_map(view_id: int, plane_aware: PlaneAwareDepth,
                          camera: Camera, best_views: Mapping[int, int],
                          cameras: Mapping[int, Camera],
                          depths: Mapping[int, DepthMap],
                          view_order: Sequence[int],
                          depth_tol_rel: float = 0.01) -> SupervisionMap:
    """Assign a single source view to every pixel of ``view_id``.

    Planar pixels source the globally chosen best view of their plane.
    Non-planar pixels are back-projected through the view's plane-aware
    depth and source the first view in ``view_order`` that observes the
    point.  Pixels nobody observes stay unassigned (self-supervised).
    """
    h, w = plane_aware.source.shape
    if (camera.height, camera.width) != (h, w):
        raise ShapeError("plane-aware depth does not match the camera size")
    source = np.full((h, w), UNASSIGNED, dtype=np.int64)
    kind = np.full((h, w), REGION_UNASSIGNED, dtype=np.int64)

    planar = plane_aware.source >= SOURCE_PLANE_BASE
    plane_ids = plane_aware.source[planar] - SOURCE_PLANE_BASE
    kind[planar] = REGION_PLANE_BASE + plane_ids
    src_flat = np.full(plane_ids.shape, UNASSIGNED, dtype=np.int64)
    for pid in np.unique(plane_ids):
        if int(pid) in best_views:
            src_flat[plane_ids == pid] = best_views[int(pid)]
    source[planar] = src_flat

    nonplanar = plane_aware.source == SOURCE_ALIGNED_MONO
    kind[nonplanar] = REGION_NONPLANAR
    vs, us = np.nonzero(nonplanar)
    if len(vs):
        # back-project through this view's own depth, then race the views
        # in training order for the first confirmed observation
        depth = plane_aware.depth.values[vs, us]
        dir_cam = np.stack([(us - camera.cx) / camera.fx,
                            (vs - camera.cy) / camera.fy,
                            np.ones(len(us))], axis=-1)
        points = camera.center + (dir_cam * depth[:, None]) @ camera.rotation
        unresolved = np.arange(len(points))
        for v in view_order:
            if len(unresolved) == 0:
                break
            ok = _observation_ok(cameras[v], depths[v], points[unresolved],
                                 depth_tol_rel)
            hit = unresolved[ok]
            source[vs[hit], us[hit]] = v
            unresolved = unresolved[~ok]
    return SupervisionMap(view_id=view_id, source_view=source,
                          region_kind=kind)
