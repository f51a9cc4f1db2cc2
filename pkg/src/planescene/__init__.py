"""Plane-aware scene geometry toolkit.

Turns posed depth/normal/instance observations into globally consistent 3D
planes, scale-accurate plane-aware depth maps, visibility grids, scored
novel viewpoints, and multi-view-consistent supervision assignments.
"""

__version__ = "0.1.0"

from .core import (Camera, DepthMap, InstanceMaskMap, NormalMap, PointCloud,
                   backproject_depth, pixel_ray, project)
from .errors import PlaneSceneError

__all__ = [
    "Camera", "DepthMap", "InstanceMaskMap", "NormalMap", "PointCloud",
    "backproject_depth", "pixel_ray", "project", "PlaneSceneError",
    "__version__",
]
