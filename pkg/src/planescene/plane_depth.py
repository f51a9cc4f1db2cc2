"""Plane-aware depth maps: ray-plane intersections on planar pixels and
affinely aligned monocular depth everywhere else.

Planar pixels take their depth from the globally fitted plane, which
extrapolates beyond the observed region; the scale/offset pair aligning the
relative monocular depth is estimated by least squares over exactly those
planar pixels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import Camera, DepthMap, pixel_ray, pixel_rays
from .errors import InsufficientDataError
from .planes import GlobalPlane
from .segmentation import PlaneMask2D

__all__ = [
    "SOURCE_INVALID", "SOURCE_ALIGNED_MONO", "SOURCE_PLANE_BASE",
    "PlaneAwareDepth", "ray_plane_depth", "align_monocular",
    "build_plane_aware_depth", "render_plane_set", "render_plane_set_depth",
]

SOURCE_INVALID = 0
SOURCE_ALIGNED_MONO = 1
SOURCE_PLANE_BASE = 1000  # PLANE pixels are tagged SOURCE_PLANE_BASE + plane id

_EPS_PARALLEL = 1e-8


@dataclass(frozen=True)
class PlaneAwareDepth:
    """Depth map with per-pixel provenance tags and the mono alignment.

    ``source`` uses the serialized encoding directly: 0 = INVALID,
    1 = ALIGNED_MONO, 1000 + plane_id = PLANE.
    """

    depth: DepthMap
    source: np.ndarray
    align_a: float
    align_b: float
    align_rms: float
    align_valid: bool

    def __post_init__(self) -> None:
        src = np.asarray(self.source, dtype=np.int64)
        src.setflags(write=False)
        object.__setattr__(self, "source", src)

    @property
    def plane_pixels(self) -> np.ndarray:
        return self.source >= SOURCE_PLANE_BASE


def ray_plane_depth(plane: GlobalPlane, camera: Camera, pixel
                    ) -> float | None:
    """Depth of the ray-plane intersection at one pixel.

    With the z-normalized ray ``(o, r)`` the depth is
    ``t = (-n.o - d) / (n.r)``.  Returns None ("no hit") when the ray is
    nearly parallel to the plane or the intersection lies behind the camera.
    """
    origin, direction = pixel_ray(camera, pixel)
    denom = float(plane.normal @ direction)
    if abs(denom) < _EPS_PARALLEL:
        return None
    t = (-float(plane.normal @ origin) - plane.offset) / denom
    if t <= 0:
        return None
    return t


def align_monocular(mono: DepthMap, plane_depths: DepthMap,
                    plane_pixel_mask: np.ndarray
                    ) -> tuple[float, float, float]:
    """Least-squares affine alignment of relative mono depth to plane depth.

    Solves ``argmin_(a,b) sum (a * mono + b - plane_depth)^2`` over planar
    pixels where both inputs are valid, via mean-centered normal equations.

    Returns:
        ``(a, b, rms)`` with rms the post-fit residual.

    Raises:
        InsufficientDataError: Fewer than two usable pixels, or the mono
            values have zero variance.
    """
    usable = np.asarray(plane_pixel_mask, dtype=bool) & \
        mono.validity & plane_depths.validity
    x = mono.values[usable]
    y = plane_depths.values[usable]
    if len(x) < 2:
        raise InsufficientDataError(
            f"alignment needs >= 2 planar pixels with mono depth, have {len(x)}")
    xm, ym = x.mean(), y.mean()
    var = float(((x - xm) ** 2).sum())
    if var <= 1e-18 * max(float(xm * xm), 1.0) * len(x):
        raise InsufficientDataError("mono depth has no variance on planar pixels")
    a = float(((x - xm) * (y - ym)).sum() / var)
    b = float(ym - a * xm)
    rms = float(np.sqrt(np.mean((a * x + b - y) ** 2)))
    return a, b, rms


def build_plane_aware_depth(camera: Camera,
                            masks_with_planes: Sequence[
                                tuple[PlaneMask2D, GlobalPlane]],
                            mono: DepthMap | None
                            ) -> PlaneAwareDepth:
    """Assemble the per-view plane-aware depth map.

    Planar pixels (one fitted plane per mask) get ray-plane depths; grazing
    intersections degrade to ALIGNED_MONO, intersections behind the camera
    become INVALID.  The mono alignment is fit on all valid planar pixels;
    non-planar pixels get ``a * mono + b``.  If alignment is impossible the
    fallback is (a, b) = (1, 0) with all mono pixels INVALID so downstream
    supervision skips them.
    """
    h, w = camera.height, camera.width
    origin, dirs = pixel_rays(camera)
    values = np.zeros((h, w))
    source = np.zeros((h, w), dtype=np.int64)
    mono_candidate = np.ones((h, w), dtype=bool)

    for mask, plane in sorted(masks_with_planes, key=lambda mp: mp[1].id):
        if not plane.fitted:
            raise ValueError(f"plane {plane.id} is not fitted")
        denom = dirs @ plane.normal
        num = -float(plane.normal @ origin) - plane.offset
        with np.errstate(divide="ignore", invalid="ignore"):
            t = num / denom
        m = mask.mask
        grazing = m & (np.abs(denom) < _EPS_PARALLEL)
        hit = m & ~grazing & (t > 0)
        behind = m & ~grazing & ~hit
        values[hit] = t[hit]
        source[hit] = SOURCE_PLANE_BASE + plane.id
        mono_candidate[hit] = False
        mono_candidate[behind] = False  # stays INVALID

    plane_pixels = source >= SOURCE_PLANE_BASE
    align_a, align_b, align_rms = 1.0, 0.0, float("nan")
    align_valid = False
    if mono is not None:
        try:
            align_a, align_b, align_rms = align_monocular(
                mono, DepthMap(values, plane_pixels), plane_pixels)
            align_valid = True
        except InsufficientDataError:
            align_valid = False
        if align_valid:
            fill = mono_candidate & mono.validity
            aligned = align_a * mono.values + align_b
            fill &= aligned > 0
            values[fill] = aligned[fill]
            source[fill] = SOURCE_ALIGNED_MONO

    validity = source != SOURCE_INVALID
    return PlaneAwareDepth(depth=DepthMap(np.where(validity, values, 0.0),
                                          validity),
                           source=source, align_a=align_a, align_b=align_b,
                           align_rms=align_rms, align_valid=align_valid)


def render_plane_set(planes: Sequence[GlobalPlane], camera: Camera
                     ) -> tuple[DepthMap, np.ndarray]:
    """Nearest fitted plane per pixel, each clipped to its support extent.

    Planes are bounded by the in-plane bounding rectangle of their support
    points, so only observed extent occludes.  Stands in for a rendered
    depth map at novel viewpoints.

    Returns:
        ``(depth, plane_id)`` with plane_id = -1 where no plane is hit.
    """
    origin, dirs = pixel_rays(camera)
    h, w = dirs.shape[:2]
    best = np.full((h, w), np.inf)
    best_id = np.full((h, w), -1, dtype=np.int64)
    for plane in planes:
        if not plane.fitted or len(plane.support) == 0:
            continue
        n = plane.normal
        axis = int(np.argmin(np.abs(n)))
        e1 = np.cross(n, np.eye(3)[axis])
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(n, e1)
        s1 = plane.support.points @ e1
        s2 = plane.support.points @ e2
        lo1, hi1, lo2, hi2 = s1.min(), s1.max(), s2.min(), s2.max()

        denom = dirs @ n
        num = -float(n @ origin) - plane.offset
        with np.errstate(divide="ignore", invalid="ignore"):
            t = num / denom
        hit = (np.abs(denom) >= _EPS_PARALLEL) & (t > 0)
        t_safe = np.where(hit, t, 0.0)
        pts = origin + t_safe[..., None] * dirs
        p1 = pts @ e1
        p2 = pts @ e2
        hit &= (p1 >= lo1) & (p1 <= hi1) & (p2 >= lo2) & (p2 <= hi2)
        closer = hit & (t < best)
        best = np.where(closer, t, best)
        best_id = np.where(closer, plane.id, best_id)
    valid = np.isfinite(best)
    return DepthMap(np.where(valid, best, 0.0), valid), best_id


def render_plane_set_depth(planes: Sequence[GlobalPlane], camera: Camera
                           ) -> DepthMap:
    """Depth-only variant of :func:`render_plane_set`."""
    return render_plane_set(planes, camera)[0]
