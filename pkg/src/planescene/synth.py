"""Synthetic box-room scenes with analytic ray-cast ground truth.

Scenes are built from rectangular faces (walls, box sides) plus optional
sphere/axis-aligned-box primitives for non-planar content.  Ray casting
produces color, depth, normal, instance, and plane-id rasters used as
ground truth by the test oracles and by the pipeline's inpainting stub.

World frame: y is up; a room spans ``[0, extents]`` on each axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import (Camera, DepthMap, InstanceMaskMap, NormalMap, PointCloud,
                   look_at_world_to_cam, pixel_rays)
from .errors import InputError

__all__ = [
    "RectFace", "Sphere", "Box", "SceneSpec", "ViewBundle",
    "box_room_faces", "box_faces", "doorway_wall_faces", "make_camera",
    "default_albedos", "raycast_view", "corrupt_mono",
    "sample_surface_points", "scene_bounds", "spec_to_dict", "spec_from_dict",
]

_EPS_T = 1e-9


@dataclass(frozen=True)
class RectFace:
    """Rectangle ``point + s*edge_u + t*edge_v`` for s, t in [0, 1].

    ``edge_u`` and ``edge_v`` must be perpendicular; the face normal is
    ``unit(edge_u x edge_v)``.  ``plane_id`` labels the ground-truth plane
    (> 0); ``instance_id`` is unique per face.
    """

    point: tuple[float, float, float]
    edge_u: tuple[float, float, float]
    edge_v: tuple[float, float, float]
    instance_id: int
    plane_id: int

    def __post_init__(self) -> None:
        eu, ev = np.asarray(self.edge_u, float), np.asarray(self.edge_v, float)
        if abs(float(eu @ ev)) > 1e-9 * np.linalg.norm(eu) * np.linalg.norm(ev):
            raise InputError("rect edges must be perpendicular")
        if np.linalg.norm(np.cross(eu, ev)) < 1e-12:
            raise InputError("rect face is degenerate")

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(self.edge_u, self.edge_v)
        return n / np.linalg.norm(n)

    @property
    def offset(self) -> float:
        """Plane offset d in n.x + d = 0."""
        return -float(self.normal @ np.asarray(self.point, float))

    @property
    def area(self) -> float:
        return float(np.linalg.norm(np.cross(self.edge_u, self.edge_v)))


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float
    instance_id: int


@dataclass(frozen=True)
class Box:
    """Axis-aligned box primitive (non-planar content for the rasters)."""

    center: tuple[float, float, float]
    size: tuple[float, float, float]
    instance_id: int


@dataclass(frozen=True)
class SceneSpec:
    """Complete synthetic scene: geometry, cameras, and flat albedos."""

    seed: int
    extents: tuple[float, float, float]
    faces: tuple[RectFace, ...]
    primitives: tuple[Sphere | Box, ...] = ()
    cameras: tuple[Camera, ...] = ()
    albedos: dict[int, tuple[float, float, float]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not all(e > 0 for e in self.extents):
            raise InputError("room extents must be positive")
        ids = [f.instance_id for f in self.faces] + \
              [p.instance_id for p in self.primitives]
        if len(ids) != len(set(ids)):
            raise InputError("instance ids must be unique")
        if any(i <= 0 for i in ids):
            raise InputError("instance ids must be positive (0 = unlabeled)")
        if not self.albedos:
            object.__setattr__(self, "albedos", default_albedos(ids, self.seed))

    def albedo(self, instance_id: int) -> np.ndarray:
        return np.asarray(self.albedos[instance_id], dtype=np.float64)


@dataclass(frozen=True)
class ViewBundle:
    """Ray-cast rasters for one camera, all sharing the camera resolution."""

    camera: Camera
    color: np.ndarray            # (H, W, 3) in [0, 1]
    depth: DepthMap
    normals: NormalMap           # camera frame, front-facing
    instances: InstanceMaskMap
    plane_ids: np.ndarray        # (H, W), 0 for primitives and misses


def default_albedos(instance_ids, seed: int) -> dict:
    """Distinct flat colors per instance (shading-free by design)."""
    rng = np.random.default_rng(seed)
    albedos = {}
    for inst in sorted(set(int(i) for i in instance_ids)):
        albedos[inst] = tuple(np.round(0.15 + 0.7 * rng.random(3), 6))
    return albedos


def box_room_faces(extents, first_instance: int = 1) -> list[RectFace]:
    """Six inward-facing walls of the room ``[0, extents]``."""
    ex, ey, ez = (float(e) for e in extents)
    i = first_instance
    return [
        RectFace((0, 0, 0), (0, 0, ez), (ex, 0, 0), i + 0, i + 0),      # floor, +y
        RectFace((0, ey, 0), (ex, 0, 0), (0, 0, ez), i + 1, i + 1),     # ceiling, -y
        RectFace((0, 0, 0), (0, ey, 0), (0, 0, ez), i + 2, i + 2),      # x=0, +x
        RectFace((ex, 0, 0), (0, 0, ez), (0, ey, 0), i + 3, i + 3),     # x=ex, -x
        RectFace((0, 0, 0), (ex, 0, 0), (0, ey, 0), i + 4, i + 4),      # z=0, +z
        RectFace((0, 0, ez), (0, ey, 0), (ex, 0, 0), i + 5, i + 5),     # z=ez, -z
    ]


def box_faces(center, size, first_instance: int) -> list[RectFace]:
    """Six outward-facing rectangles of an axis-aligned box.

    Each face gets its own instance id and plane id, mimicking how an
    instance segmenter splits a box into per-face segments.
    """
    c = np.asarray(center, float)
    h = np.asarray(size, float) / 2.0
    lo, hi = c - h, c + h
    i = first_instance
    t = tuple
    return [
        RectFace(t(lo), (0, 0, hi[2] - lo[2]), (0, hi[1] - lo[1], 0), i, i),            # x=lo, -x
        RectFace(t((hi[0], lo[1], lo[2])), (0, hi[1] - lo[1], 0),
                 (0, 0, hi[2] - lo[2]), i + 1, i + 1),                                   # x=hi, +x
        RectFace(t(lo), (hi[0] - lo[0], 0, 0), (0, 0, hi[2] - lo[2]), i + 2, i + 2),     # y=lo, -y
        RectFace(t((lo[0], hi[1], lo[2])), (0, 0, hi[2] - lo[2]),
                 (hi[0] - lo[0], 0, 0), i + 3, i + 3),                                   # y=hi, +y
        RectFace(t(lo), (0, hi[1] - lo[1], 0), (hi[0] - lo[0], 0, 0), i + 4, i + 4),     # z=lo, -z
        RectFace(t((lo[0], lo[1], hi[2])), (hi[0] - lo[0], 0, 0),
                 (0, hi[1] - lo[1], 0), i + 5, i + 5),                                   # z=hi, +z
    ]


def doorway_wall_faces(extents, wall_x: float, door_lo_z: float,
                       door_hi_z: float, door_height: float,
                       first_instance: int) -> list[RectFace]:
    """Dividing wall at ``x = wall_x`` with a doorway gap, as three rects.

    The gap spans ``[door_lo_z, door_hi_z]`` in z and ``[0, door_height]``
    in y.  All pieces share one plane equation but carry distinct instance
    and plane ids.
    """
    ex, ey, ez = (float(e) for e in extents)
    if not (0 < wall_x < ex and 0 <= door_lo_z < door_hi_z <= ez
            and 0 < door_height <= ey):
        raise InputError("doorway wall does not fit in the room")
    i = first_instance
    faces = [
        RectFace((wall_x, 0, 0), (0, ey, 0), (0, 0, door_lo_z), i, i),
        RectFace((wall_x, 0, door_hi_z), (0, ey, 0), (0, 0, ez - door_hi_z),
                 i + 1, i + 1),
        RectFace((wall_x, door_height, door_lo_z), (0, ey - door_height, 0),
                 (0, 0, door_hi_z - door_lo_z), i + 2, i + 2),
    ]
    return [f for f in faces if f.area > 1e-12]


def make_camera(center, target, *, width: int = 64, height: int = 48,
                fov_deg: float = 70.0, up=(0.0, 1.0, 0.0)) -> Camera:
    """Convenience pinhole camera looking from ``center`` at ``target``."""
    fx = 0.5 * width / math.tan(math.radians(fov_deg) / 2.0)
    return Camera(fx=fx, fy=fx, cx=width / 2.0, cy=height / 2.0,
                  width=width, height=height,
                  world_to_cam=look_at_world_to_cam(center, target, up))


# ---------------------------------------------------------------------------
# Ray casting

def _intersect_face(face: RectFace, origin, dirs):
    n = face.normal
    d = face.offset
    denom = dirs @ n
    num = -(origin @ n) - d
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(np.abs(denom) > 1e-12, num / denom, np.inf)
        t_safe = np.where(np.isfinite(t), t, 0.0)
        pts = origin + t_safe[..., None] * dirs
        rel = pts - np.asarray(face.point, float)
        eu = np.asarray(face.edge_u, float)
        ev = np.asarray(face.edge_v, float)
        su = (rel @ eu) / float(eu @ eu)
        sv = (rel @ ev) / float(ev @ ev)
        hit = (np.isfinite(t) & (t > _EPS_T)
               & (su >= 0) & (su <= 1) & (sv >= 0) & (sv <= 1))
    return np.where(hit, t, np.inf), np.broadcast_to(n, dirs.shape)


def _intersect_sphere(sphere: Sphere, origin, dirs):
    c = np.asarray(sphere.center, float)
    oc = origin - c
    a = np.einsum("...i,...i->...", dirs, dirs)
    b = 2.0 * (dirs @ oc)
    c0 = float(oc @ oc) - sphere.radius ** 2
    disc = b * b - 4.0 * a * c0
    sq = np.sqrt(np.maximum(disc, 0.0))
    t_near = (-b - sq) / (2.0 * a)
    t_far = (-b + sq) / (2.0 * a)
    t = np.where(t_near > _EPS_T, t_near, t_far)
    t = np.where((disc >= 0) & (t > _EPS_T), t, np.inf)
    pts = origin + np.where(np.isfinite(t), t, 0.0)[..., None] * dirs
    normals = (pts - c) / sphere.radius
    return t, normals


def _intersect_box(box: Box, origin, dirs):
    c = np.asarray(box.center, float)
    h = np.asarray(box.size, float) / 2.0
    lo, hi = c - h, c + h
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origin) * inv
        t2 = (hi - origin) * inv
    t_lo = np.minimum(t1, t2)
    t_hi = np.maximum(t1, t2)
    t_near = t_lo.max(axis=-1)
    t_far = t_hi.min(axis=-1)
    t = np.where(t_near > _EPS_T, t_near, t_far)
    hit = (t_near <= t_far) & (t > _EPS_T)
    t = np.where(hit, t, np.inf)
    # Normal axis: entering rays hit the slab with the largest entry time,
    # rays starting inside exit through the smallest exit time.
    axis = np.argmax(np.where((t_near > _EPS_T)[..., None], t_lo, -t_hi),
                     axis=-1)
    normals = np.zeros(dirs.shape)
    for ax in range(3):
        sel = axis == ax
        normals[sel, ax] = 1.0
    return t, normals


def raycast_view(spec: SceneSpec, camera: Camera) -> ViewBundle:
    """Ray-cast all scene objects for one camera.

    Depth equals camera-frame z (rays are z-normalized), normals are
    camera-frame and front-facing, color is the flat instance albedo, and
    the plane-id raster names the ground-truth plane (0 for primitives).
    Pixels that miss every object are invalid.
    """
    origin, dirs = pixel_rays(camera)
    h, w = dirs.shape[:2]
    best_t = np.full((h, w), np.inf)
    best_normal = np.zeros((h, w, 3))
    best_instance = np.zeros((h, w), dtype=np.int64)
    best_plane = np.zeros((h, w), dtype=np.int64)

    def consider(t, normals, instance_id, plane_id):
        nonlocal best_t, best_normal, best_instance, best_plane
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_normal = np.where(closer[..., None], normals, best_normal)
        best_instance = np.where(closer, instance_id, best_instance)
        best_plane = np.where(closer, plane_id, best_plane)

    for face in spec.faces:
        t, normals = _intersect_face(face, origin, dirs)
        consider(t, normals, face.instance_id, face.plane_id)
    for prim in spec.primitives:
        if isinstance(prim, Sphere):
            t, normals = _intersect_sphere(prim, origin, dirs)
        else:
            t, normals = _intersect_box(prim, origin, dirs)
        consider(t, normals, prim.instance_id, 0)

    valid = np.isfinite(best_t)
    # Orient normals against the ray (front-facing), then rotate to camera.
    facing = np.einsum("hwc,hwc->hw", best_normal, dirs)
    best_normal = np.where((facing > 0)[..., None], -best_normal, best_normal)
    cam_normals = best_normal @ camera.rotation.T
    lengths = np.linalg.norm(cam_normals, axis=-1)
    cam_normals = np.where(valid[..., None],
                           cam_normals / np.where(lengths > 0, lengths, 1.0)[..., None],
                           0.0)

    color = np.zeros((h, w, 3))
    for inst in sorted(set(best_instance[valid].tolist())):
        color[best_instance == inst] = spec.albedo(int(inst))

    return ViewBundle(
        camera=camera,
        color=color,
        depth=DepthMap(np.where(valid, best_t, 0.0), valid),
        normals=NormalMap(cam_normals, valid),
        instances=InstanceMaskMap(np.where(valid, best_instance, 0)),
        plane_ids=np.where(valid, best_plane, 0),
    )


def corrupt_mono(depth: DepthMap, a: float, b: float, noise_sigma: float,
                 seed: int) -> DepthMap:
    """Simulate a relative monocular depth prediction.

    Inverts the affine model ``D = a * D_hat + b`` and adds seeded Gaussian
    noise, so aligning the result against plane depths should recover
    ``(a, b)``.  Values are clamped positive; invalid pixels stay invalid.
    """
    if a == 0:
        raise InputError("mono corruption scale must be nonzero")
    rng = np.random.default_rng(seed)
    values = (depth.values - b) / a
    if noise_sigma > 0:
        values = values + rng.normal(0.0, noise_sigma, size=values.shape)
    values = np.maximum(values, 1e-6)
    return DepthMap(np.where(depth.validity, values, 0.0), depth.validity)


def scene_bounds(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Axis-aligned room bounds ``(min, max)``."""
    return np.zeros(3), np.asarray(spec.extents, dtype=np.float64)


def spec_to_dict(spec: SceneSpec) -> dict:
    from .io import camera_to_dict  # local import avoids a module cycle
    prims = []
    for p in spec.primitives:
        if isinstance(p, Sphere):
            prims.append({"type": "sphere", "center": list(p.center),
                          "radius": p.radius, "instance_id": p.instance_id})
        else:
            prims.append({"type": "box", "center": list(p.center),
                          "size": list(p.size), "instance_id": p.instance_id})
    return {
        "seed": spec.seed,
        "extents": list(spec.extents),
        "faces": [{"point": list(f.point), "edge_u": list(f.edge_u),
                   "edge_v": list(f.edge_v), "instance_id": f.instance_id,
                   "plane_id": f.plane_id} for f in spec.faces],
        "primitives": prims,
        "cameras": [camera_to_dict(c) for c in spec.cameras],
        "albedos": {str(k): list(v) for k, v in spec.albedos.items()},
    }


def spec_from_dict(data: dict) -> SceneSpec:
    from .io import camera_from_dict
    try:
        faces = tuple(RectFace(point=tuple(f["point"]),
                               edge_u=tuple(f["edge_u"]),
                               edge_v=tuple(f["edge_v"]),
                               instance_id=int(f["instance_id"]),
                               plane_id=int(f["plane_id"]))
                      for f in data["faces"])
        prims = []
        for p in data.get("primitives", []):
            if p["type"] == "sphere":
                prims.append(Sphere(center=tuple(p["center"]),
                                    radius=float(p["radius"]),
                                    instance_id=int(p["instance_id"])))
            elif p["type"] == "box":
                prims.append(Box(center=tuple(p["center"]),
                                 size=tuple(p["size"]),
                                 instance_id=int(p["instance_id"])))
            else:
                raise InputError(f"unknown primitive type {p['type']!r}")
        return SceneSpec(
            seed=int(data["seed"]),
            extents=tuple(float(e) for e in data["extents"]),
            faces=faces,
            primitives=tuple(prims),
            cameras=tuple(camera_from_dict(c) for c in data.get("cameras", [])),
            albedos={int(k): tuple(v)
                     for k, v in data.get("albedos", {}).items()},
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"malformed scene spec: {exc}") from exc


def sample_surface_points(spec: SceneSpec, spacing: float) -> PointCloud:
    """Deterministic quasi-uniform surface samples with normals.

    Faces are sampled on a regular lattice at roughly ``spacing`` meters;
    spheres use a Fibonacci lattice; box primitives sample their six sides.
    Used as the ground-truth cloud for reconstruction metrics.
    """
    points, normals = [], []
    for face in spec.faces:
        eu = np.asarray(face.edge_u, float)
        ev = np.asarray(face.edge_v, float)
        nu = max(2, int(np.ceil(np.linalg.norm(eu) / spacing)) + 1)
        nv = max(2, int(np.ceil(np.linalg.norm(ev) / spacing)) + 1)
        su, sv = np.meshgrid(np.linspace(0, 1, nu), np.linspace(0, 1, nv))
        pts = (np.asarray(face.point, float)
               + su[..., None] * eu + sv[..., None] * ev).reshape(-1, 3)
        points.append(pts)
        normals.append(np.broadcast_to(face.normal, pts.shape))
    for prim in spec.primitives:
        if isinstance(prim, Sphere):
            count = max(16, int(4 * np.pi * prim.radius ** 2 / spacing ** 2))
            k = np.arange(count) + 0.5
            phi = np.arccos(1 - 2 * k / count)
            theta = np.pi * (1 + 5 ** 0.5) * k
            dirs = np.stack([np.cos(theta) * np.sin(phi),
                             np.sin(theta) * np.sin(phi),
                             np.cos(phi)], axis=1)
            points.append(np.asarray(prim.center, float) + prim.radius * dirs)
            normals.append(dirs)
        else:
            for face in box_faces(prim.center, prim.size, first_instance=1):
                eu = np.asarray(face.edge_u, float)
                ev = np.asarray(face.edge_v, float)
                nu = max(2, int(np.ceil(np.linalg.norm(eu) / spacing)) + 1)
                nv = max(2, int(np.ceil(np.linalg.norm(ev) / spacing)) + 1)
                su, sv = np.meshgrid(np.linspace(0, 1, nu), np.linspace(0, 1, nv))
                pts = (np.asarray(face.point, float)
                       + su[..., None] * eu + sv[..., None] * ev).reshape(-1, 3)
                points.append(pts)
                normals.append(np.broadcast_to(face.normal, pts.shape))
    all_points = np.concatenate(points, axis=0)
    all_normals = np.concatenate(normals, axis=0)
    return PointCloud(points=all_points, normals=all_normals)
