"""Cameras, rays, projection/back-projection, and shared raster types.

Conventions used across the whole package:

* Camera frame: x-right, y-down, z-forward; poses are stored world-to-camera.
* Depth means camera-frame z (not ray length).  Rays returned by
  :func:`pixel_ray` are normalized so their camera-frame z component is 1,
  which makes the ray parameter equal to z-depth.
* Pixel ``(u, v)`` maps to the continuous image point ``(u, v)`` (no +0.5
  center offset); ``u`` runs along the width, ``v`` along the height.
* Projection computes ``u = fx * (x / z) + cx`` (normalize first, then apply
  intrinsics).  Oracle code that must agree bit-for-bit relies on this exact
  operation order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BoundsError, ShapeError

__all__ = [
    "Camera",
    "DepthMap",
    "NormalMap",
    "InstanceMaskMap",
    "PointCloud",
    "pixel_ray",
    "pixel_rays",
    "project",
    "project_points",
    "backproject_depth",
    "look_at_world_to_cam",
    "transform_points",
]

_ROTATION_TOL = 1e-6


def _frozen(array: np.ndarray, dtype, shape_hint: str) -> np.ndarray:
    """Return a read-only float/int copy of ``array`` (immutability by default)."""
    out = np.array(array, dtype=dtype)
    out.setflags(write=False)
    if out.ndim == 0:
        raise ShapeError(f"expected {shape_hint}, got scalar")
    return out


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with a world-to-camera rigid pose.

    Attributes:
        fx, fy: Focal lengths in pixels.
        cx, cy: Principal point in pixels.
        width, height: Image size in pixels.
        world_to_cam: 4x4 rigid transform mapping world points into the
            camera frame (x-right, y-down, z-forward).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_cam: np.ndarray

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        T = _frozen(self.world_to_cam, np.float64, "(4, 4) transform")
        if T.shape != (4, 4):
            raise ShapeError(f"world_to_cam must be 4x4, got {T.shape}")
        R = T[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=_ROTATION_TOL):
            raise ValueError("rotation block is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > _ROTATION_TOL:
            raise ValueError("rotation block must have determinant +1")
        if not np.allclose(T[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValueError("last row of world_to_cam must be [0, 0, 0, 1]")
        object.__setattr__(self, "world_to_cam", T)

    @property
    def rotation(self) -> np.ndarray:
        """World-to-camera rotation (3x3)."""
        return self.world_to_cam[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        """World-to-camera translation (3,)."""
        return self.world_to_cam[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def cam_to_world(self) -> np.ndarray:
        """Inverse pose (camera-to-world, 4x4)."""
        out = np.eye(4)
        out[:3, :3] = self.rotation.T
        out[:3, 3] = self.center
        return out

    def with_pose(self, world_to_cam: np.ndarray) -> "Camera":
        """Copy of this camera with a different pose (intrinsics kept)."""
        return Camera(self.fx, self.fy, self.cx, self.cy,
                      self.width, self.height, world_to_cam)


@dataclass(frozen=True)
class DepthMap:
    """Per-pixel z-depth in meters with a validity mask."""

    values: np.ndarray
    validity: np.ndarray

    def __post_init__(self) -> None:
        vals = _frozen(self.values, np.float64, "(H, W) depth")
        if vals.ndim != 2:
            raise ShapeError(f"depth values must be 2-D, got shape {vals.shape}")
        mask = _frozen(self.validity, bool, "(H, W) validity")
        if mask.shape != vals.shape:
            raise ShapeError("depth validity mask must match value shape")
        valid = vals[mask]
        if valid.size and not (np.all(np.isfinite(valid)) and np.all(valid > 0)):
            raise ValueError("valid depths must be finite and positive")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "validity", mask)

    @classmethod
    def from_values(cls, values: np.ndarray) -> "DepthMap":
        """Build a depth map treating finite, positive entries as valid."""
        values = np.asarray(values, dtype=np.float64)
        validity = np.isfinite(values) & (values > 0)
        return cls(np.where(validity, values, 0.0), validity)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class NormalMap:
    """Per-pixel unit normals in the camera frame with a validity mask."""

    values: np.ndarray
    validity: np.ndarray

    def __post_init__(self) -> None:
        vals = _frozen(self.values, np.float64, "(H, W, 3) normals")
        if vals.ndim != 3 or vals.shape[2] != 3:
            raise ShapeError(f"normal values must be (H, W, 3), got {vals.shape}")
        mask = _frozen(self.validity, bool, "(H, W) validity")
        if mask.shape != vals.shape[:2]:
            raise ShapeError("normal validity mask must match value shape")
        norms = np.linalg.norm(vals[mask], axis=-1)
        if norms.size and not np.all(np.abs(norms - 1.0) <= 1e-4):
            raise ValueError("valid normals must have unit length (tol 1e-4)")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "validity", mask)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class InstanceMaskMap:
    """Per-pixel non-negative instance ids; 0 means unlabeled."""

    labels: np.ndarray

    def __post_init__(self) -> None:
        labels = _frozen(self.labels, np.int64, "(H, W) labels")
        if labels.ndim != 2:
            raise ShapeError(f"instance labels must be 2-D, got {labels.shape}")
        if labels.size and labels.min() < 0:
            raise ValueError("instance labels must be non-negative")
        if labels.size and labels.max() >= 2 ** 16:
            raise ValueError("instance labels must fit in 16 bits")
        object.__setattr__(self, "labels", labels)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


@dataclass(frozen=True)
class PointCloud:
    """World-frame points with optional unit normals and pixel provenance.

    Provenance records, per point, the view id and source pixel ``(u, v)``
    the point was back-projected from.
    """

    points: np.ndarray
    normals: np.ndarray | None = None
    view_ids: np.ndarray | None = None
    pixels: np.ndarray | None = None

    def __post_init__(self) -> None:
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        n = len(pts)
        if self.normals is not None:
            nrm = _frozen(self.normals, np.float64, "(N, 3) normals")
            if nrm.shape != (n, 3):
                raise ShapeError("normals must match point count")
            lengths = np.linalg.norm(nrm, axis=1)
            if lengths.size and not np.all(np.abs(lengths - 1.0) <= 1e-4):
                raise ValueError("point normals must have unit length (tol 1e-4)")
            object.__setattr__(self, "normals", nrm)
        if self.view_ids is not None:
            ids = _frozen(self.view_ids, np.int64, "(N,) view ids")
            if ids.shape != (n,):
                raise ShapeError("view_ids must match point count")
            object.__setattr__(self, "view_ids", ids)
        if self.pixels is not None:
            px = _frozen(self.pixels, np.int64, "(N, 2) pixels")
            if px.shape != (n, 2):
                raise ShapeError("pixels must match point count")
            object.__setattr__(self, "pixels", px)

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.empty((0, 3)))


def _check_pixel_bounds(camera: Camera, u: float, v: float) -> None:
    if not (0 <= u <= camera.width - 1 and 0 <= v <= camera.height - 1):
        raise BoundsError(
            f"pixel ({u}, {v}) outside {camera.width}x{camera.height} image")


def pixel_ray(camera: Camera, pixel) -> tuple[np.ndarray, np.ndarray]:
    """Cast the world-frame ray through an image pixel.

    The direction is scaled so its camera-frame z component equals 1, hence
    ``origin + t * direction`` sits at z-depth ``t``.

    Args:
        camera: Source camera.
        pixel: ``(u, v)`` coordinate, continuous values allowed.

    Returns:
        ``(origin, direction)`` where origin is the camera center.

    Raises:
        BoundsError: If the pixel lies outside the image.
    """
    u, v = float(pixel[0]), float(pixel[1])
    _check_pixel_bounds(camera, u, v)
    dir_cam = np.array([(u - camera.cx) / camera.fx,
                        (v - camera.cy) / camera.fy,
                        1.0])
    return camera.center, camera.rotation.T @ dir_cam


def pixel_rays(camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """World-frame rays for every pixel of ``camera``.

    Returns:
        ``(origin, directions)`` with directions shaped ``(H, W, 3)`` and
        z-normalized like :func:`pixel_ray`.
    """
    us = np.arange(camera.width, dtype=np.float64)
    vs = np.arange(camera.height, dtype=np.float64)
    uu, vv = np.meshgrid(us, vs)
    dirs_cam = np.stack([(uu - camera.cx) / camera.fx,
                         (vv - camera.cy) / camera.fy,
                         np.ones_like(uu)], axis=-1)
    dirs_world = dirs_cam @ camera.rotation  # == dirs_cam @ R == (R^T @ d)^T rows
    return camera.center, dirs_world


def project(camera: Camera, point) -> tuple[tuple[float, float], float] | None:
    """Project a world point into the image.

    Args:
        camera: Target camera.
        point: World-frame 3D point.

    Returns:
        ``((u, v), z_depth)``, or ``None`` when the point is at or behind the
        camera plane (z <= 0).  The pixel may lie outside the image bounds;
        callers filter.
    """
    p = np.asarray(point, dtype=np.float64)
    pc = camera.rotation @ p + camera.translation
    z = float(pc[2])
    if z <= 0:
        return None
    u = camera.fx * (float(pc[0]) / z) + camera.cx
    v = camera.fy * (float(pc[1]) / z) + camera.cy
    return (u, v), z


def project_points(camera: Camera, points: np.ndarray
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection of ``(N, 3)`` world points.

    Returns:
        ``(uv, z)`` with uv shaped ``(N, 2)`` and z shaped ``(N,)``.  Entries
        with ``z <= 0`` carry NaN pixel coordinates; callers must mask on z.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    R = camera.rotation
    t = camera.translation
    x = R[0, 0] * pts[:, 0] + R[0, 1] * pts[:, 1] + R[0, 2] * pts[:, 2] + t[0]
    y = R[1, 0] * pts[:, 0] + R[1, 1] * pts[:, 1] + R[1, 2] * pts[:, 2] + t[1]
    z = R[2, 0] * pts[:, 0] + R[2, 1] * pts[:, 1] + R[2, 2] * pts[:, 2] + t[2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(z > 0, camera.fx * (x / z) + camera.cx, np.nan)
        v = np.where(z > 0, camera.fy * (y / z) + camera.cy, np.nan)
    return np.stack([u, v], axis=1), z


def backproject_depth(camera: Camera, depth: DepthMap, stride: int = 1,
                      view_id: int = 0) -> PointCloud:
    """Back-project a depth map into a world-frame point cloud.

    One point is produced per valid pixel on the stride lattice
    ``(u, v) in {0, stride, 2*stride, ...}``, with provenance recorded.

    Raises:
        ShapeError: If the depth map does not match the camera size.
        ValueError: If stride is not positive.
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if (depth.height, depth.width) != (camera.height, camera.width):
        raise ShapeError(
            f"depth {depth.width}x{depth.height} does not match "
            f"camera {camera.width}x{camera.height}")
    vs, us = np.mgrid[0:camera.height:stride, 0:camera.width:stride]
    keep = depth.validity[vs, us]
    us, vs = us[keep], vs[keep]
    if us.size == 0:
        return PointCloud.empty()
    z = depth.values[vs, us]
    dir_cam = np.stack([(us - camera.cx) / camera.fx,
                        (vs - camera.cy) / camera.fy,
                        np.ones_like(z)], axis=-1)
    pts = camera.center + (dir_cam * z[:, None]) @ camera.rotation
    return PointCloud(
        points=pts,
        view_ids=np.full(len(pts), view_id, dtype=np.int64),
        pixels=np.stack([us, vs], axis=1),
    )


def look_at_world_to_cam(center, target, up) -> np.ndarray:
    """Roll-free world-to-camera pose looking from ``center`` at ``target``.

    ``up`` is the world-frame up direction; the camera y axis (down) is made
    orthogonal to the viewing direction with no roll about it.

    Raises:
        ValueError: If center and target coincide or the view direction is
            parallel to ``up``.
    """
    center = np.asarray(center, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    fwd = target - center
    norm = np.linalg.norm(fwd)
    if norm < 1e-12:
        raise ValueError("look-at target coincides with the camera center")
    z = fwd / norm
    x = np.cross(z, up)
    xnorm = np.linalg.norm(x)
    if xnorm < 1e-9:
        # Viewing direction parallel to up: fall back to an arbitrary
        # horizontal axis so the pose stays well defined.
        alt = np.array([1.0, 0.0, 0.0])
        if abs(np.dot(alt, z)) > 0.9:
            alt = np.array([0.0, 0.0, 1.0])
        x = np.cross(z, alt)
        xnorm = np.linalg.norm(x)
    x = x / xnorm
    y = np.cross(z, x)
    R = np.stack([x, y, z], axis=0)
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = -R @ center
    return T


def transform_points(transform: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Apply a 4x4 rigid transform to ``(N, 3)`` points."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return pts @ np.asarray(transform)[:3, :3].T + np.asarray(transform)[:3, 3]
