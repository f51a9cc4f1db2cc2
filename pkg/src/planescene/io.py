"""File formats: PFM rasters, 16-bit PNG labels, binary PLY, camera JSON,
and the packed visibility-grid container.

All writers are deterministic: identical inputs produce identical bytes.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .core import Camera, DepthMap, InstanceMaskMap, NormalMap, PointCloud
from .errors import InputError

def _open_binary(path):
    try:
        return open(path, "rb")
    except OSError as exc:
        raise InputError(f"cannot open {path}: {exc}") from exc


__all__ = [
    "read_pfm", "write_pfm",
    "read_depth_pfm", "write_depth_pfm",
    "read_normal_pfm", "write_normal_pfm",
    "read_png16", "write_png16",
    "read_instance_png", "write_instance_png",
    "read_mask_png", "write_mask_png",
    "read_color_png", "write_color_png",
    "read_ply", "write_ply",
    "camera_to_dict", "camera_from_dict",
    "save_cameras_json", "load_cameras_json",
    "save_json", "load_json",
]


# ---------------------------------------------------------------------------
# PFM (float rasters; rows stored bottom-up, little-endian)

def write_pfm(path, values: np.ndarray) -> None:
    """Write a (H, W) or (H, W, 3) float raster as little-endian PFM."""
    values = np.asarray(values, dtype=np.float32)
    if values.ndim == 2:
        header = b"Pf"
    elif values.ndim == 3 and values.shape[2] == 3:
        header = b"PF"
    else:
        raise InputError(f"PFM rasters must be (H, W) or (H, W, 3), got {values.shape}")
    h, w = values.shape[:2]
    with open(path, "wb") as fh:
        fh.write(header + b"\n")
        fh.write(f"{w} {h}\n".encode("ascii"))
        fh.write(b"-1.0\n")  # negative scale = little endian
        fh.write(np.ascontiguousarray(values[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    """Read a PFM raster written by :func:`write_pfm` (big-endian accepted)."""
    with _open_binary(path) as fh:
        magic = fh.readline().strip()
        if magic == b"PF":
            channels = 3
        elif magic == b"Pf":
            channels = 1
        else:
            raise InputError(f"not a PFM file: {path}")
        dims = fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(fh.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(4 * w * h * channels), dtype=dtype)
    shape = (h, w) if channels == 1 else (h, w, 3)
    return data.reshape(shape)[::-1].astype(np.float64)


def write_depth_pfm(path, depth: DepthMap) -> None:
    """Depth PFM: invalid pixels are stored as 0."""
    write_pfm(path, np.where(depth.validity, depth.values, 0.0))


def read_depth_pfm(path) -> DepthMap:
    values = read_pfm(path)
    if values.ndim != 2:
        raise InputError(f"depth PFM must be single channel: {path}")
    return DepthMap.from_values(values)


def write_normal_pfm(path, normals: NormalMap) -> None:
    """Normal PFM: invalid pixels are stored as the zero vector."""
    vals = np.where(normals.validity[..., None], normals.values, 0.0)
    write_pfm(path, vals)


def read_normal_pfm(path) -> NormalMap:
    values = read_pfm(path)
    if values.ndim != 3:
        raise InputError(f"normal PFM must have 3 channels: {path}")
    norms = np.linalg.norm(values, axis=-1)
    validity = norms > 0.5
    safe = np.where(norms > 0.5, norms, 1.0)
    return NormalMap(values / safe[..., None], validity)


# ---------------------------------------------------------------------------
# PNG (16-bit labels, 8-bit masks and color)

def write_png16(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= 2 ** 16:
        raise InputError("16-bit PNG labels must be in [0, 65535]")
    Image.fromarray(labels.astype(np.uint16)).save(path, format="PNG")


def read_png16(path) -> np.ndarray:
    with Image.open(_open_binary(path)) as img:
        arr = np.asarray(img)
    return arr.astype(np.int64)


def write_instance_png(path, instances: InstanceMaskMap) -> None:
    write_png16(path, instances.labels)


def read_instance_png(path) -> InstanceMaskMap:
    return InstanceMaskMap(read_png16(path))


def write_mask_png(path, mask: np.ndarray) -> None:
    """Binary mask as 8-bit PNG (0/255)."""
    arr = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def read_mask_png(path) -> np.ndarray:
    with Image.open(_open_binary(path)) as img:
        arr = np.asarray(img)
    return arr >= 128


def write_color_png(path, color: np.ndarray) -> None:
    """Color raster with float channels in [0, 1] as 8-bit RGB PNG."""
    arr = np.clip(np.asarray(color, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.rint(arr * 255.0).astype(np.uint8), mode="RGB").save(
        path, format="PNG")


def read_color_png(path) -> np.ndarray:
    with Image.open(_open_binary(path)) as img:
        arr = np.asarray(img.convert("RGB"))
    return arr.astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# PLY (binary little-endian, x y z [nx ny nz] float32)

def write_ply(path, cloud: PointCloud) -> None:
    has_normals = cloud.normals is not None
    props = ["x", "y", "z"] + (["nx", "ny", "nz"] if has_normals else [])
    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {len(cloud)}"]
    header += [f"property float {p}" for p in props]
    header.append("end_header")
    data = cloud.points.astype("<f4")
    if has_normals:
        data = np.hstack([data, cloud.normals.astype("<f4")])
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(np.ascontiguousarray(data).tobytes())


def read_ply(path) -> PointCloud:
    with _open_binary(path) as fh:
        if fh.readline().strip() != b"ply":
            raise InputError(f"not a PLY file: {path}")
        fmt = fh.readline().split()
        if fmt[:2] != [b"format", b"binary_little_endian"]:
            raise InputError("only binary little-endian PLY is supported")
        count = 0
        props: list[str] = []
        while True:
            line = fh.readline()
            if not line:
                raise InputError("truncated PLY header")
            parts = line.split()
            if parts[0] == b"element":
                if parts[1] != b"vertex":
                    raise InputError("only vertex elements are supported")
                count = int(parts[2])
            elif parts[0] == b"property":
                if parts[1] != b"float":
                    raise InputError("only float properties are supported")
                props.append(parts[2].decode("ascii"))
            elif parts[0] == b"end_header":
                break
        data = np.frombuffer(fh.read(4 * count * len(props)), dtype="<f4")
    data = data.reshape(count, len(props)).astype(np.float64)
    if props[:3] != ["x", "y", "z"]:
        raise InputError("PLY must start with x y z properties")
    normals = None
    if props[3:6] == ["nx", "ny", "nz"]:
        normals = data[:, 3:6]
        lengths = np.linalg.norm(normals, axis=1)
        normals = normals / np.where(lengths > 0, lengths, 1.0)[:, None]
    return PointCloud(points=data[:, :3], normals=normals)


# ---------------------------------------------------------------------------
# Camera JSON

def camera_to_dict(camera: Camera) -> dict:
    return {
        "fx": camera.fx, "fy": camera.fy,
        "cx": camera.cx, "cy": camera.cy,
        "width": camera.width, "height": camera.height,
        "world_to_cam": [float(x) for x in camera.world_to_cam.ravel()],
    }


def camera_from_dict(data: dict) -> Camera:
    try:
        return Camera(
            fx=float(data["fx"]), fy=float(data["fy"]),
            cx=float(data["cx"]), cy=float(data["cy"]),
            width=int(data["width"]), height=int(data["height"]),
            world_to_cam=np.array(data["world_to_cam"], dtype=np.float64
                                  ).reshape(4, 4),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise InputError(f"malformed camera record: {exc}") from exc


def save_cameras_json(path, cameras: Sequence[Camera]) -> None:
    save_json(path, [camera_to_dict(c) for c in cameras])


def load_cameras_json(path) -> list[Camera]:
    data = load_json(path)
    if isinstance(data, dict):
        data = [data]
    return [camera_from_dict(d) for d in data]


# ---------------------------------------------------------------------------
# JSON helpers

def save_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_json(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read JSON from {path}: {exc}") from exc
