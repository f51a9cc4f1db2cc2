"""Plane-aware novel view selection plus the auxiliary elliptical trajectory.

For each global plane, candidate camera centers are the visible voxel
centers; each candidate looks at the plane centroid (roll-free, gravity up)
and is scored by ``R + |cos(theta)| - D``: support coverage, viewing
alignment with the plane normal, and plane distance normalized by the scene
diagonal so the three terms share a scale.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import Camera, DepthMap, look_at_world_to_cam, project_points
from .errors import DegenerateGeometryError, EmptySceneError
from .planes import GlobalPlane
from .visibility import VisibilityGrid

__all__ = [
    "ViewProposal", "ScoreComponents", "mean_camera_up", "score_candidate",
    "select_novel_views", "elliptical_trajectory",
]

OccluderDepthFn = Callable[[Camera], DepthMap]


@dataclass(frozen=True)
class ScoreComponents:
    coverage: float      # R: fraction of support points visible
    cos_theta: float     # |cos| of view direction vs plane normal
    distance: float      # point-plane distance over the scene diagonal


@dataclass(frozen=True)
class ViewProposal:
    """A proposed camera pose with its selection provenance."""

    camera: Camera
    target_plane_id: int | None
    score: float | None
    components: ScoreComponents | None
    voxel_linear_index: int | None = None

    @property
    def view_direction(self) -> np.ndarray:
        return self.camera.rotation[2]  # camera z axis in world frame


def mean_camera_up(cameras: Sequence[Camera]) -> np.ndarray:
    """Gravity-aligned world up estimated from camera orientations.

    Camera y points down, so each view's up is the negated second rotation
    row; the normalized mean is used for roll-free look-at poses.
    """
    ups = np.array([-cam.rotation[1] for cam in cameras])
    mean = ups.sum(axis=0)
    norm = np.linalg.norm(mean)
    if norm < 1e-9:
        return np.array([0.0, 1.0, 0.0])
    return mean / norm


def score_candidate(candidate: np.ndarray, plane: GlobalPlane,
                    grid: VisibilityGrid, reference_camera: Camera,
                    occluder_depth_fn: OccluderDepthFn | None,
                    up: np.ndarray | None = None,
                    depth_tol_rel: float = 0.01
                    ) -> tuple[float, ScoreComponents, Camera]:
    """Score one candidate camera center against one plane.

    Coverage counts support points that project in-bounds through the
    candidate camera (intrinsics copied from the reference view, looking at
    the plane centroid) and pass the relative-depth occlusion test against
    ``occluder_depth_fn``.

    Raises:
        DegenerateGeometryError: Candidate coincides with the centroid.
    """
    if not plane.fitted:
        raise ValueError(f"plane {plane.id} is not fitted")
    candidate = np.asarray(candidate, dtype=np.float64)
    target = plane.centroid
    if np.linalg.norm(target - candidate) < 1e-9:
        raise DegenerateGeometryError(
            "candidate coincides with the plane centroid")
    if up is None:
        up = mean_camera_up([reference_camera])
    camera = reference_camera.with_pose(
        look_at_world_to_cam(candidate, target, up))

    pts = plane.support.points
    if len(pts) == 0:
        coverage = 0.0
    else:
        uv, z = project_points(camera, pts)
        ok = z > 0
        px = np.zeros(len(pts), dtype=np.int64)
        py = np.zeros(len(pts), dtype=np.int64)
        px[ok] = np.rint(uv[ok, 0]).astype(np.int64)
        py[ok] = np.rint(uv[ok, 1]).astype(np.int64)
        ok &= (px >= 0) & (px <= camera.width - 1) & \
              (py >= 0) & (py <= camera.height - 1)
        if occluder_depth_fn is not None:
            depth = occluder_depth_fn(camera)
            pxc = np.clip(px, 0, camera.width - 1)
            pyc = np.clip(py, 0, camera.height - 1)
            rendered = depth.values[pyc, pxc]
            ok &= depth.validity[pyc, pxc]
            ok &= np.abs(z - rendered) <= depth_tol_rel * rendered
        coverage = float(ok.sum() / len(pts))

    view_dir = target - candidate
    view_dir = view_dir / np.linalg.norm(view_dir)
    cos_theta = float(abs(view_dir @ plane.normal))
    distance = float(abs(candidate @ plane.normal + plane.offset)) / \
        grid.diagonal
    components = ScoreComponents(coverage=coverage, cos_theta=cos_theta,
                                 distance=distance)
    return coverage + cos_theta - distance, components, camera


def select_novel_views(planes: Sequence[GlobalPlane], grid: VisibilityGrid,
                       reference_camera: Camera, per_plane: int = 1, *,
                       occluder_depth_fn: OccluderDepthFn | None = None,
                       stride: int = 1, min_plane_clearance: float = 0.2,
                       depth_tol_rel: float = 0.01,
                       dedup_angle_deg: float = 5.0) -> list[ViewProposal]:
    """Pick the best-scoring visible voxel centers for every plane.

    Candidates may be subsampled by ``stride`` (per voxel-index axis) and
    are dropped when closer than ``min_plane_clearance`` to any fitted
    plane.  Ties break toward the lower voxel linear index (x-fastest).
    Proposals from different planes are deduplicated when their centers are
    within one voxel and their viewing directions within
    ``dedup_angle_deg``.

    Raises:
        EmptySceneError: The grid has no visible voxels.
    """
    centers, lin = grid.visible_voxels()
    if len(centers) == 0:
        raise EmptySceneError("visibility grid has no visible voxels")
    if stride > 1:
        nx, ny, _ = grid.dims
        ix = lin % nx
        iy = (lin // nx) % ny
        iz = lin // (nx * ny)
        keep = (ix % stride == 0) & (iy % stride == 0) & (iz % stride == 0)
        centers, lin = centers[keep], lin[keep]
    fitted = [p for p in planes if p.fitted]
    if fitted and min_plane_clearance > 0:
        clear = np.ones(len(centers), dtype=bool)
        for plane in fitted:
            clear &= np.abs(centers @ plane.normal + plane.offset) >= \
                min_plane_clearance
        centers, lin = centers[clear], lin[clear]

    up = mean_camera_up([reference_camera])
    nominated: list[ViewProposal] = []
    for plane in sorted(fitted, key=lambda p: p.id):
        scored: list[tuple[float, int, ScoreComponents, Camera]] = []
        for center, lin_idx in zip(centers, lin):
            try:
                score, components, camera = score_candidate(
                    center, plane, grid, reference_camera, occluder_depth_fn,
                    up=up, depth_tol_rel=depth_tol_rel)
            except DegenerateGeometryError:
                continue
            scored.append((score, int(lin_idx), components, camera))
        scored.sort(key=lambda item: (-item[0], item[1]))
        for score, lin_idx, components, camera in scored[:per_plane]:
            nominated.append(ViewProposal(camera=camera,
                                          target_plane_id=plane.id,
                                          score=score, components=components,
                                          voxel_linear_index=lin_idx))
    # Poses selected by different planes collapse when nearly identical;
    # the earlier (lower plane id / higher rank) proposal wins.
    cos_dedup = np.cos(np.radians(dedup_angle_deg))
    proposals: list[ViewProposal] = []
    for prop in nominated:
        duplicate = False
        for prior in proposals:
            close = np.linalg.norm(prior.camera.center - prop.camera.center) \
                <= grid.voxel_size
            aligned = float(prior.view_direction @ prop.view_direction) \
                >= cos_dedup
            if close and aligned:
                duplicate = True
                break
        if not duplicate:
            proposals.append(prop)
    return proposals


def elliptical_trajectory(scene_bounds: tuple[np.ndarray, np.ndarray],
                          n_views: int,
                          reference_cameras: Sequence[Camera]
                          ) -> list[ViewProposal]:
    """Evenly spaced poses on an axis-aligned ellipse around the scene.

    The ellipse sits at the mean reference-camera height with semi-axes
    0.4x the scene extent in x and z; every pose looks at the scene
    centroid.  Intrinsics come from the first reference camera.

    Raises:
        DegenerateGeometryError: Zero x/z extent.
        ValueError: ``n_views < 1`` or no reference cameras.
    """
    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    if not reference_cameras:
        raise ValueError("need at least one reference camera")
    lo = np.asarray(scene_bounds[0], dtype=np.float64)
    hi = np.asarray(scene_bounds[1], dtype=np.float64)
    extent = hi - lo
    if extent[0] <= 0 or extent[2] <= 0:
        raise DegenerateGeometryError("scene bounds have zero x/z extent")
    center = (lo + hi) / 2.0
    height = float(np.mean([cam.center[1] for cam in reference_cameras]))
    up = mean_camera_up(reference_cameras)
    reference = reference_cameras[0]
    proposals = []
    for i in range(n_views):
        angle = 2.0 * np.pi * i / n_views
        pos = np.array([center[0] + 0.4 * extent[0] * np.cos(angle),
                        height,
                        center[2] + 0.4 * extent[2] * np.sin(angle)])
        camera = reference.with_pose(look_at_world_to_cam(pos, center, up))
        proposals.append(ViewProposal(camera=camera, target_plane_id=None,
                                      score=None, components=None))
    return proposals
