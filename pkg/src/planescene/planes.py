"""Global 3D planes: occlusion-aware point association, mask merging, and
seeded RANSAC fitting with a total-least-squares refit.

Per-view plane masks are linked to the scene point cloud by projection (a
point joins a mask only when its depth agrees with the view's depth map to
a relative tolerance), merged across views with a union-find over spatial
overlap and normal agreement, and finally fitted on the points confirmed by
at least two views.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .core import Camera, DepthMap, PointCloud, project_points
from .errors import DegenerateGeometryError
from .segmentation import PlaneMask2D

__all__ = [
    "MaskEntry", "MaskAssociation", "GlobalPlane",
    "associate_points", "merge_masks", "fit_plane_ransac",
]


@dataclass(frozen=True)
class MaskEntry:
    """One per-view mask with its associated scene-point indices."""

    view_id: int
    mask_index: int
    point_indices: np.ndarray    # indices into MaskAssociation.points
    world_normal: np.ndarray     # mask mean normal rotated into world frame

    def __post_init__(self) -> None:
        idx = np.asarray(self.point_indices, dtype=np.int64)
        idx.setflags(write=False)
        object.__setattr__(self, "point_indices", idx)
        n = np.asarray(self.world_normal, dtype=np.float64)
        n.setflags(write=False)
        object.__setattr__(self, "world_normal", n)


@dataclass(frozen=True)
class MaskAssociation:
    """Scene cloud plus, per mask, the point indices that project into it."""

    points: np.ndarray           # (N, 3) concatenated scene cloud
    origin_view_ids: np.ndarray  # (N,) view each point was back-projected from
    origin_pixels: np.ndarray    # (N, 2) source pixel of each point
    entries: tuple[MaskEntry, ...]

    def entry(self, view_id: int, mask_index: int) -> MaskEntry:
        for e in self.entries:
            if (e.view_id, e.mask_index) == (view_id, mask_index):
                return e
        raise KeyError((view_id, mask_index))


@dataclass(frozen=True)
class GlobalPlane:
    """A world-frame plane ``n . x + d = 0`` aggregating masks across views.

    ``normal``/``offset`` are None until :func:`fit_plane_ransac` runs.  The
    sign convention orients ``normal`` so the majority of observing camera
    centers c satisfy ``n . c + d > 0``.  ``confident_support`` holds the
    points observed by at least two distinct views (restricted, after
    fitting, to the RANSAC consensus).
    """

    id: int
    members: tuple[tuple[int, int], ...]
    support: PointCloud
    confident_support: PointCloud
    centroid: np.ndarray
    normal: np.ndarray | None = None
    offset: float | None = None
    used_fallback_support: bool = False

    @property
    def fitted(self) -> bool:
        return self.normal is not None

    @property
    def member_views(self) -> tuple[int, ...]:
        return tuple(sorted({v for v, _ in self.members}))

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        if not self.fitted:
            raise ValueError("plane is not fitted")
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return pts @ self.normal + self.offset


def associate_points(masks: Sequence[Sequence[PlaneMask2D]],
                     clouds: Sequence[PointCloud],
                     cameras: Sequence[Camera],
                     depths: Sequence[DepthMap],
                     depth_tol_rel: float = 0.01) -> MaskAssociation:
    """Associate scene points to per-view plane masks by projection.

    A point joins mask ``m`` of view ``v`` iff its projection lands on a
    mask pixel (nearest-pixel rounding) and its camera depth deviates from
    the view's depth map at that pixel by at most ``depth_tol_rel``
    (occlusion test).

    Args:
        masks: Per-view lists of plane masks (index = mask index).
        clouds: Per-view back-projected clouds forming the scene cloud.
        cameras: Per-view cameras, same indexing.
        depths: Per-view depth maps used for the occlusion test.
        depth_tol_rel: Relative depth tolerance (default 1%).
    """
    if not (len(masks) == len(clouds) == len(cameras) == len(depths)):
        raise ValueError("per-view inputs must have equal length")
    parts = [c.points for c in clouds if len(c)]
    points = np.concatenate(parts, axis=0) if parts else np.empty((0, 3))
    origin_views = np.concatenate(
        [c.view_ids if c.view_ids is not None
         else np.full(len(c), i, dtype=np.int64)
         for i, c in enumerate(clouds) if len(c)]) if parts else \
        np.empty(0, dtype=np.int64)
    origin_pixels = np.concatenate(
        [c.pixels if c.pixels is not None
         else np.zeros((len(c), 2), dtype=np.int64)
         for c in clouds if len(c)]) if parts else \
        np.empty((0, 2), dtype=np.int64)

    entries: list[MaskEntry] = []
    for v, (view_masks, camera, depth) in enumerate(zip(masks, cameras, depths)):
        world_normals = [camera.rotation.T @ m.mean_normal for m in view_masks]
        if len(points) == 0:
            entries.extend(
                MaskEntry(v, j, np.empty(0, dtype=np.int64), world_normals[j])
                for j in range(len(view_masks)))
            continue
        uv, z = project_points(camera, points)
        ok = z > 0
        px = np.zeros(len(points), dtype=np.int64)
        py = np.zeros(len(points), dtype=np.int64)
        px[ok] = np.rint(uv[ok, 0]).astype(np.int64)
        py[ok] = np.rint(uv[ok, 1]).astype(np.int64)
        ok &= (px >= 0) & (px <= camera.width - 1) & \
              (py >= 0) & (py <= camera.height - 1)
        px_c = np.clip(px, 0, camera.width - 1)
        py_c = np.clip(py, 0, camera.height - 1)
        rendered = depth.values[py_c, px_c]
        ok &= depth.validity[py_c, px_c]
        ok &= np.abs(z - rendered) <= depth_tol_rel * rendered
        for j, mask in enumerate(view_masks):
            member = ok & mask.mask[py_c, px_c]
            entries.append(MaskEntry(v, j, np.nonzero(member)[0],
                                     world_normals[j]))
    return MaskAssociation(points=points, origin_view_ids=origin_views,
                           origin_pixels=origin_pixels,
                           entries=tuple(entries))


class _UnionFind:
    def __init__(self, size: int) -> None:
        self.parent = list(range(size))

    def find(self, x: int) -> int:
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def merge_masks(assoc: MaskAssociation, overlap_thresh: float = 0.3,
                normal_angle_deg: float = 15.0) -> list[GlobalPlane]:
    """Union-find merge of associated masks into (unfitted) global planes.

    Two masks join when the shared fraction of their associated points,
    normalized by the smaller set, reaches ``overlap_thresh`` and their
    world-frame mean normals agree within ``normal_angle_deg``.  The result
    is independent of mask enumeration order; planes are numbered by their
    smallest (view, mask) member.
    """
    entries = assoc.entries
    uf = _UnionFind(len(entries))
    cos_thresh = np.cos(np.radians(normal_angle_deg))
    for i in range(len(entries)):
        a = entries[i]
        if len(a.point_indices) == 0:
            continue
        for j in range(i + 1, len(entries)):
            b = entries[j]
            if len(b.point_indices) == 0:
                continue
            if float(a.world_normal @ b.world_normal) < cos_thresh:
                continue
            shared = np.intersect1d(a.point_indices, b.point_indices,
                                    assume_unique=True).size
            smaller = min(len(a.point_indices), len(b.point_indices))
            if shared / smaller >= overlap_thresh:
                uf.union(i, j)

    groups: dict[int, list[int]] = {}
    for i in range(len(entries)):
        groups.setdefault(uf.find(i), []).append(i)
    ordered = sorted(groups.values(),
                     key=lambda g: min((entries[i].view_id,
                                        entries[i].mask_index) for i in g))

    planes: list[GlobalPlane] = []
    for plane_id, group in enumerate(ordered):
        members = tuple(sorted((entries[i].view_id, entries[i].mask_index)
                               for i in group))
        idx_parts, view_parts = [], []
        for i in group:
            idx_parts.append(entries[i].point_indices)
            view_parts.append(np.full(len(entries[i].point_indices),
                                      entries[i].view_id, dtype=np.int64))
        all_idx = np.concatenate(idx_parts) if idx_parts else \
            np.empty(0, dtype=np.int64)
        all_views = np.concatenate(view_parts) if view_parts else \
            np.empty(0, dtype=np.int64)
        support_idx = np.unique(all_idx)
        # Count distinct observing views per point: unique (index, view)
        # pairs, then multiplicity per index.
        if len(all_idx):
            pair_keys = np.unique(all_idx * (all_views.max() + 1) + all_views)
            obs_idx = pair_keys // (all_views.max() + 1)
            uniq, counts = np.unique(obs_idx, return_counts=True)
            confident_idx = uniq[counts >= 2]
        else:
            confident_idx = np.empty(0, dtype=np.int64)
        support = _subcloud(assoc, support_idx)
        confident = _subcloud(assoc, confident_idx)
        centroid = support.points.mean(axis=0) if len(support) else np.zeros(3)
        planes.append(GlobalPlane(id=plane_id, members=members,
                                  support=support, confident_support=confident,
                                  centroid=centroid))
    return planes


def _subcloud(assoc: MaskAssociation, indices: np.ndarray) -> PointCloud:
    return PointCloud(points=assoc.points[indices],
                      view_ids=assoc.origin_view_ids[indices],
                      pixels=assoc.origin_pixels[indices])


def fit_plane_ransac(plane: GlobalPlane,
                     camera_centers: Mapping[int, np.ndarray] | None,
                     inlier_dist: float = 0.02, iterations: int = 1000,
                     seed: int = 0) -> GlobalPlane:
    """Fit ``n . x + d = 0`` to the plane's confident support by RANSAC.

    Three-point minimal samples for a fixed, seeded iteration count; the
    final parameters are the total-least-squares fit (covariance
    eigen-decomposition) on the consensus inliers.  When fewer than three
    confident points exist, the full support is used and the plane flagged.
    The camera-facing sign convention is applied using the member views'
    camera centers.

    Raises:
        DegenerateGeometryError: Fewer than 3 usable points, or all points
            collinear.
    """
    fallback = len(plane.confident_support) < 3
    cloud = plane.support if fallback else plane.confident_support
    pts = cloud.points
    if len(pts) < 3:
        raise DegenerateGeometryError(
            f"plane {plane.id}: {len(pts)} points are too few to fit")

    rng = np.random.default_rng(seed)
    best_count = 0
    best_dist: np.ndarray | None = None
    for _ in range(iterations):
        i, j, k = rng.choice(len(pts), size=3, replace=False)
        v1 = pts[j] - pts[i]
        v2 = pts[k] - pts[i]
        n = np.cross(v1, v2)
        norm = np.linalg.norm(n)
        if norm <= 1e-9 * np.linalg.norm(v1) * np.linalg.norm(v2):
            continue  # collinear sample
        n = n / norm
        d = -float(n @ pts[i])
        dist = np.abs(pts @ n + d)
        count = int((dist <= inlier_dist).sum())
        if count > best_count:
            best_count = count
            best_dist = dist
    if best_dist is None or best_count < 3:
        raise DegenerateGeometryError(
            f"plane {plane.id}: support is collinear, no plane hypothesis")

    consensus = pts[best_dist <= inlier_dist]
    centroid = consensus.mean(axis=0)
    centered = consensus - centroid
    cov = centered.T @ centered
    eigvals, eigvecs = np.linalg.eigh(cov)
    if eigvals[1] <= 1e-12 * max(eigvals[2], 1e-300):
        raise DegenerateGeometryError(
            f"plane {plane.id}: consensus points are collinear")
    normal = eigvecs[:, 0]
    offset = -float(normal @ centroid)

    if camera_centers:
        centers = [np.asarray(camera_centers[v], dtype=np.float64)
                   for v in plane.member_views if v in camera_centers]
        if centers:
            signed = np.asarray(centers) @ normal + offset
            if int((signed > 0).sum()) < int((signed < 0).sum()):
                normal, offset = -normal, -offset

    conf_pts = plane.confident_support.points
    if len(conf_pts):
        keep = np.abs(conf_pts @ normal + offset) <= inlier_dist
        confident = PointCloud(
            points=conf_pts[keep],
            view_ids=None if plane.confident_support.view_ids is None
            else plane.confident_support.view_ids[keep],
            pixels=None if plane.confident_support.pixels is None
            else plane.confident_support.pixels[keep])
    else:
        confident = plane.confident_support
    return replace(plane, normal=normal, offset=offset,
                   confident_support=confident,
                   used_fallback_support=fallback)
