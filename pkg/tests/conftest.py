import sys
from pathlib import Path

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

sys.path.insert(0, str(Path(__file__).parent))

from planescene.core import Camera
from planescene.synth import (SceneSpec, Sphere, box_faces, box_room_faces,
                              doorway_wall_faces, make_camera)


def random_camera(rng: np.random.Generator, width: int = 100,
                  height: int = 80) -> Camera:
    """Camera with a random valid pose and moderate intrinsics."""
    R = Rotation.random(random_state=int(rng.integers(2 ** 31))).as_matrix()
    t = rng.uniform(-3, 3, size=3)
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = t
    return Camera(fx=float(rng.uniform(60, 160)), fy=float(rng.uniform(60, 160)),
                  cx=width / 2 + float(rng.uniform(-5, 5)),
                  cy=height / 2 + float(rng.uniform(-5, 5)),
                  width=width, height=height, world_to_cam=T)


def simple_room(extents=(4.0, 3.0, 5.0), n_cameras: int = 5, *,
                with_box: bool = False, with_sphere: bool = False,
                width: int = 64, height: int = 48, seed: int = 7,
                arc: float = 2 * np.pi) -> SceneSpec:
    """Box room with cameras on an inner ring looking through the center.

    ``arc`` controls the angular spread of the ring; a small arc gives
    strongly overlapping views (adjacent cameras see mostly the same walls).
    """
    ex, ey, ez = extents
    faces = box_room_faces(extents)
    prims = []
    next_inst = 7
    if with_box:
        faces += box_faces((ex * 0.3, 0.3, ez * 0.3), (0.8, 0.6, 0.8), next_inst)
        next_inst += 6
    if with_sphere:
        # dead center: visible from any inward-looking ring camera
        prims.append(Sphere((ex * 0.5, ey * 0.45, ez * 0.5), 0.4, next_inst))
        next_inst += 1
    center = np.array([ex / 2, ey / 2, ez / 2])
    cameras = []
    full_circle = abs(arc - 2 * np.pi) < 1e-9
    denom = n_cameras if full_circle else max(n_cameras - 1, 1)
    for i in range(n_cameras):
        ang = arc * i / denom
        pos = center + np.array([0.30 * ex * np.cos(ang), 0.1 * ey,
                                 0.30 * ez * np.sin(ang)])
        target = center - (pos - center)  # look through the room center
        cameras.append(make_camera(pos, target, width=width, height=height))
    return SceneSpec(seed=seed, extents=extents, faces=tuple(faces),
                     primitives=tuple(prims), cameras=tuple(cameras))


def covered_room(extents=(4.0, 3.0, 5.0), *, width=48, height=36,
                 seed=7) -> SceneSpec:
    """Empty room observed so thoroughly that every interior voxel is seen:
    an 8-camera ring plus downward and upward views."""
    spec = simple_room(extents, n_cameras=8, width=width, height=height,
                       seed=seed)
    ex, ey, ez = extents
    extra = (
        make_camera((ex / 2 + 0.1, ey * 0.8, ez / 2), (ex / 2, 0.1, ez / 2),
                    width=width, height=height, fov_deg=100),
        make_camera((ex / 2, ey * 0.2, ez / 2 + 0.1), (ex / 2, ey - 0.1, ez / 2),
                    width=width, height=height, fov_deg=100),
    )
    return SceneSpec(seed=seed, extents=extents, faces=spec.faces,
                     primitives=(), cameras=spec.cameras + extra)


def two_room_scene(extents=(8.0, 3.0, 5.0), n_cameras: int = 2, *,
                   width: int = 48, height: int = 36,
                   seed: int = 11) -> SceneSpec:
    """Two rooms split by a doorway wall at mid-x; cameras sit in room A
    (x < wall) so room B is mostly unobserved except through the doorway."""
    ex, ey, ez = extents
    wall_x = ex / 2
    faces = box_room_faces(extents)
    faces += doorway_wall_faces(extents, wall_x, door_lo_z=0.4 * ez,
                                door_hi_z=0.6 * ez, door_height=0.7 * ey,
                                first_instance=7)
    cameras = []
    for i in range(n_cameras):
        frac = (i + 1) / (n_cameras + 1)
        pos = (0.15 * ex, 0.5 * ey, frac * ez)
        target = (wall_x, 0.45 * ey, ez / 2)
        cameras.append(make_camera(pos, target, width=width, height=height,
                                   fov_deg=80))
    return SceneSpec(seed=seed, extents=extents, faces=tuple(faces),
                     cameras=tuple(cameras))


@pytest.fixture
def identity_camera() -> Camera:
    """fx = fy = 100, principal point at (50, 50), identity pose."""
    return Camera(fx=100.0, fy=100.0, cx=50.0, cy=50.0, width=200, height=200,
                  world_to_cam=np.eye(4))


def fit_scene_planes(spec, *, stride=2, seed=0, inlier_dist=0.02,
                     iterations=500):
    """Ground-truth-mask association + merge + fit for a synthetic scene.

    Returns (bundles, per-view mask lists, fitted planes, and the
    (view, mask_index) -> plane mapping).  Uses the ground-truth plane-id
    rasters for masks so the test isolates the geometry path from the
    clustering path.
    """
    from planescene.core import backproject_depth
    from planescene.planes import associate_points, fit_plane_ransac, merge_masks
    from planescene.segmentation import PlaneMask2D
    from planescene.synth import raycast_view

    bundles = [raycast_view(spec, c) for c in spec.cameras]
    masks = []
    for v, b in enumerate(bundles):
        view_masks = []
        for pid in np.unique(b.plane_ids):
            if pid == 0:
                continue
            m = b.plane_ids == pid
            mean = b.normals.values[m].sum(axis=0)
            mean /= np.linalg.norm(mean)
            view_masks.append(PlaneMask2D(view_id=v, mask=m, mean_normal=mean,
                                          instance_label=int(pid)))
        masks.append(view_masks)
    clouds = [backproject_depth(c, b.depth, stride=stride, view_id=v)
              for v, (c, b) in enumerate(zip(spec.cameras, bundles))]
    assoc = associate_points(masks, clouds, list(spec.cameras),
                             [b.depth for b in bundles])
    centers = {v: c.center for v, c in enumerate(spec.cameras)}
    planes = []
    mask_to_plane = {}
    for plane in merge_masks(assoc):
        try:
            fitted = fit_plane_ransac(plane, centers, inlier_dist=inlier_dist,
                                      iterations=iterations, seed=seed)
        except Exception:
            continue
        planes.append(fitted)
        for member in fitted.members:
            mask_to_plane[member] = fitted
    return bundles, masks, planes, mask_to_plane
