"""Binary visibility voxel grid and per-pixel visibility rendering.

A voxel is visible when, in at least one training view, its center projects
in-bounds with camera depth inside the view's observable range
``(0, depth * (1 + margin)]``.  Novel-view visibility masks multiply the
visibilities of uniformly spaced samples along each pixel ray up to the
rendered depth: one invisible sample makes the pixel invisible.

The grid build evaluates the documented formulas elementwise
(``u = fx * (x / z) + cx`` with nearest-pixel rounding), so a scalar
re-implementation reproduces it bit-for-bit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import Camera, DepthMap, backproject_depth, pixel_rays
from .errors import CapacityError, EmptySceneError, InputError, ShapeError

__all__ = [
    "VisibilityGrid", "VisibilityMask", "build_grid", "render_visibility",
    "sample_points_visibility", "save_grid", "load_grid",
]

_MAGIC = b"PSVISGRD"
_VERSION = 1
_CHUNK_VOXELS = 2_000_000


@dataclass(frozen=True)
class VisibilityGrid:
    """Axis-aligned voxel grid of binary visibility values.

    ``visible[ix, iy, iz]`` covers the world-space cube starting at
    ``origin + (ix, iy, iz) * voxel_size``; linear indices run x-fastest:
    ``ix + nx * (iy + ny * iz)``.
    """

    origin: np.ndarray
    voxel_size: float
    dims: tuple[int, int, int]
    visible: np.ndarray

    def __post_init__(self) -> None:
        origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        origin.setflags(write=False)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        vis = np.asarray(self.visible, dtype=bool)
        if vis.shape != self.dims:
            raise ShapeError(f"visibility array {vis.shape} != dims {self.dims}")
        vis.setflags(write=False)
        object.__setattr__(self, "visible", vis)
        if self.voxel_size <= 0:
            raise InputError("voxel size must be positive")

    @property
    def n_visible(self) -> int:
        return int(self.visible.sum())

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.origin, self.origin + np.array(self.dims) * self.voxel_size

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(np.array(self.dims) * self.voxel_size))

    def voxel_center(self, index) -> np.ndarray:
        return self.origin + (np.asarray(index, dtype=np.float64) + 0.5) * \
            self.voxel_size

    def linear_index(self, ix: int, iy: int, iz: int) -> int:
        nx, ny, _ = self.dims
        return ix + nx * (iy + ny * iz)

    def visible_voxels(self) -> tuple[np.ndarray, np.ndarray]:
        """Centers and linear indices of visible voxels, x-fastest order."""
        nx, ny, nz = self.dims
        flat = self.visible.ravel(order="F")
        lin = np.nonzero(flat)[0]
        ix = lin % nx
        iy = (lin // nx) % ny
        iz = lin // (nx * ny)
        centers = self.origin + (np.stack([ix, iy, iz], axis=1) + 0.5) * \
            self.voxel_size
        return centers, lin


@dataclass(frozen=True)
class VisibilityMask:
    """Per-pixel binary visibility V(u) for one view."""

    values: np.ndarray

    def __post_init__(self) -> None:
        vals = np.asarray(self.values, dtype=bool)
        if vals.ndim != 2:
            raise ShapeError("visibility mask must be 2-D")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def build_grid(depths: Sequence[DepthMap], cameras: Sequence[Camera],
               voxel_size: float, depth_margin_rel: float = 0.01,
               max_voxels: int = 256 ** 3) -> VisibilityGrid:
    """Build the visibility grid from training-view depth maps.

    Scene bounds cover all back-projected valid depth pixels plus one voxel
    of margin.  Voxel visibility is evaluated independently per voxel (OR
    over views).

    Raises:
        EmptySceneError: No valid depth anywhere.
        CapacityError: Grid would exceed ``max_voxels`` (increase
            ``voxel_size``).
    """
    if len(depths) != len(cameras) or not depths:
        raise InputError("need matching, non-empty depth/camera lists")
    if voxel_size <= 0:
        raise InputError("voxel size must be positive")
    mins, maxs = [], []
    for camera, depth in zip(cameras, depths):
        cloud = backproject_depth(camera, depth)
        if len(cloud) == 0:
            continue
        mins.append(cloud.points.min(axis=0))
        maxs.append(cloud.points.max(axis=0))
    if not mins:
        raise EmptySceneError("no valid depth pixels in any view")
    lo = np.min(mins, axis=0) - voxel_size
    hi = np.max(maxs, axis=0) + voxel_size
    dims = np.maximum(np.ceil((hi - lo) / voxel_size).astype(np.int64), 1)
    if int(dims.prod()) > max_voxels:
        raise CapacityError(
            f"{dims.prod()} voxels exceed the cap of {max_voxels}; "
            "increase voxel_size")
    nx, ny, nz = (int(d) for d in dims)

    xs = lo[0] + (np.arange(nx) + 0.5) * voxel_size
    ys = lo[1] + (np.arange(ny) + 0.5) * voxel_size
    zs = lo[2] + (np.arange(nz) + 0.5) * voxel_size

    visible = np.zeros((nx, ny, nz), dtype=bool)
    chunk = max(1, _CHUNK_VOXELS // max(ny * nz, 1))
    for x0 in range(0, nx, chunk):
        wx = xs[x0:x0 + chunk][:, None, None]
        wy = ys[None, :, None]
        wz = zs[None, None, :]
        block = np.zeros((wx.shape[0], ny, nz), dtype=bool)
        for camera, depth in zip(cameras, depths):
            R = camera.world_to_cam[:3, :3]
            t = camera.world_to_cam[:3, 3]
            X = R[0, 0] * wx + R[0, 1] * wy + R[0, 2] * wz + t[0]
            Y = R[1, 0] * wx + R[1, 1] * wy + R[1, 2] * wz + t[1]
            Z = R[2, 0] * wx + R[2, 1] * wy + R[2, 2] * wz + t[2]
            front = Z > 0
            with np.errstate(divide="ignore", invalid="ignore"):
                u = camera.fx * (X / Z) + camera.cx
                v = camera.fy * (Y / Z) + camera.cy
            pu = np.rint(np.where(front, u, -1.0))
            pv = np.rint(np.where(front, v, -1.0))
            inb = front & (pu >= 0) & (pu <= camera.width - 1) & \
                (pv >= 0) & (pv <= camera.height - 1)
            pui = np.where(inb, pu, 0).astype(np.int64)
            pvi = np.where(inb, pv, 0).astype(np.int64)
            rendered = depth.values[pvi, pui]
            ok = inb & depth.validity[pvi, pui] & \
                (Z <= rendered * (1.0 + depth_margin_rel))
            block |= ok
        visible[x0:x0 + chunk] = block
    return VisibilityGrid(origin=lo, voxel_size=float(voxel_size),
                          dims=(nx, ny, nz), visible=visible)


def sample_points_visibility(grid: VisibilityGrid, points: np.ndarray
                             ) -> np.ndarray:
    """Nearest-voxel visibility lookup; points outside the grid count as
    invisible."""
    pts = np.asarray(points, dtype=np.float64)
    idx = np.floor((pts - grid.origin) / grid.voxel_size).astype(np.int64)
    nx, ny, nz = grid.dims
    inb = ((idx[..., 0] >= 0) & (idx[..., 0] < nx) &
           (idx[..., 1] >= 0) & (idx[..., 1] < ny) &
           (idx[..., 2] >= 0) & (idx[..., 2] < nz))
    safe = np.where(inb[..., None], idx, 0)
    vis = grid.visible[safe[..., 0], safe[..., 1], safe[..., 2]]
    return vis & inb


def render_visibility(grid: VisibilityGrid, camera: Camera,
                      rendered_depth: DepthMap, q_samples: int = 32
                      ) -> VisibilityMask:
    """Per-pixel visibility as the product of sampled voxel visibilities.

    Q points are placed at depths ``(i + 0.5) / Q * depth`` along each
    z-normalized pixel ray (midpoints avoid both the camera center and the
    exact surface).  Pixels with invalid rendered depth are invisible.

    Raises:
        ShapeError: Depth size mismatch.
        InputError: ``q_samples < 1``.
    """
    if q_samples < 1:
        raise InputError("q_samples must be >= 1")
    if (rendered_depth.height, rendered_depth.width) != \
            (camera.height, camera.width):
        raise ShapeError("rendered depth must match the camera size")
    origin, dirs = pixel_rays(camera)
    out = rendered_depth.validity.copy()
    depth = rendered_depth.values
    for i in range(q_samples):
        frac = (i + 0.5) / q_samples
        pts = origin + (frac * depth)[..., None] * dirs
        vis = sample_points_visibility(grid, pts)
        out &= vis
        if not out.any():
            break
    return VisibilityMask(out)


# ---------------------------------------------------------------------------
# Grid container format: 16-byte header (magic, version, reserved), origin
# as 3 little-endian f64, voxel size f64, dims 3 x u32, visibility bits
# packed row-major x-fastest.

def save_grid(path, grid: VisibilityGrid) -> None:
    header = _MAGIC + struct.pack("<II", _VERSION, 0)
    meta = struct.pack("<3dd3I", *grid.origin, grid.voxel_size, *grid.dims)
    bits = np.packbits(grid.visible.ravel(order="F"))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(meta)
        fh.write(bits.tobytes())


def load_grid(path) -> VisibilityGrid:
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise InputError(f"cannot open {path}: {exc}") from exc
    with fh:
        header = fh.read(16)
        if header[:8] != _MAGIC:
            raise InputError(f"not a visibility grid file: {path}")
        version, _ = struct.unpack("<II", header[8:])
        if version != _VERSION:
            raise InputError(f"unsupported grid version {version}")
        meta = fh.read(8 * 4 + 12)
        ox, oy, oz, voxel_size, nx, ny, nz = struct.unpack("<3dd3I", meta)
        count = nx * ny * nz
        bits = np.frombuffer(fh.read((count + 7) // 8), dtype=np.uint8)
    flat = np.unpackbits(bits)[:count].astype(bool)
    visible = flat.reshape((nx, ny, nz), order="F")
    return VisibilityGrid(origin=np.array([ox, oy, oz]),
                          voxel_size=voxel_size, dims=(nx, ny, nz),
                          visible=visible)
