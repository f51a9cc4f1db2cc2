"""Per-view 2D plane extraction: normal clustering filtered by instances.

Pixels with coherent surface orientation are grouped by spherical k-means
over the normal map; each cluster is intersected with the instance masks and
split into 4-connected components, keeping components above a size threshold
as plane masks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import InstanceMaskMap, NormalMap
from .errors import InsufficientDataError, ShapeError

__all__ = ["PlaneMask2D", "cluster_normals", "extract_plane_masks"]

_KMEANS_MAX_ITER = 50
_CC_STRUCTURE = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


@dataclass(frozen=True)
class PlaneMask2D:
    """One per-view plane candidate: a pixel mask with its mean normal.

    Attributes:
        view_id: Index of the owning view.
        mask: (H, W) boolean pixel membership.
        mean_normal: Unit mean of the member normals, camera frame.
        instance_label: The single instance id shared by all member pixels.
    """

    view_id: int
    mask: np.ndarray
    mean_normal: np.ndarray
    instance_label: int

    def __post_init__(self) -> None:
        mask = np.asarray(self.mask, dtype=bool)
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)
        normal = np.asarray(self.mean_normal, dtype=np.float64)
        if abs(np.linalg.norm(normal) - 1.0) > 1e-4:
            raise ValueError("mean_normal must be unit length")
        normal.setflags(write=False)
        object.__setattr__(self, "mean_normal", normal)

    @property
    def pixel_count(self) -> int:
        return int(self.mask.sum())


def cluster_normals(normals: NormalMap, k: int, seed: int) -> np.ndarray:
    """Spherical k-means over valid normals.

    Cosine distance (maximize dot product) with centroids renormalized each
    iteration; runs at most 50 iterations or until assignments stabilize.
    Deterministic for a fixed seed.

    Args:
        normals: Input normal map.
        k: Number of clusters, >= 1.
        seed: PRNG seed for centroid initialization.

    Returns:
        (H, W) int array of cluster ids in [0, k); invalid pixels get -1.

    Raises:
        InsufficientDataError: Fewer valid pixels than ``k``.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    valid = normals.validity
    vecs = normals.values[valid]
    if len(vecs) < k:
        raise InsufficientDataError(
            f"need at least {k} valid normals, have {len(vecs)}")

    rng = np.random.default_rng(seed)
    centroids = vecs[rng.choice(len(vecs), size=k, replace=False)].copy()

    assignment: np.ndarray | None = None
    for _ in range(_KMEANS_MAX_ITER):
        # Highest dot product wins; np.argmax keeps the lowest id on ties.
        new_assignment = np.argmax(vecs @ centroids.T, axis=1)
        if assignment is not None and np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment
        for c in range(k):
            members = vecs[assignment == c]
            if len(members) == 0:
                continue  # empty cluster keeps its previous centroid
            mean = members.sum(axis=0)
            norm = np.linalg.norm(mean)
            if norm > 1e-12:
                centroids[c] = mean / norm

    out = np.full(valid.shape, -1, dtype=np.int64)
    out[valid] = assignment
    return out


def extract_plane_masks(cluster_map: np.ndarray, instances: InstanceMaskMap,
                        normals: NormalMap, min_mask_pixels: int,
                        view_id: int = 0) -> list[PlaneMask2D]:
    """Split clusters by instance label and connectivity into plane masks.

    Each output mask is one 4-connected component of (cluster, instance)
    pixels with at least ``min_mask_pixels`` members.  Pixels with invalid
    normals or instance label 0 (unlabeled) never join a mask.  Output order
    is (cluster id, instance label, component) and is deterministic.

    Raises:
        ShapeError: If the rasters disagree in size.
    """
    cluster_map = np.asarray(cluster_map)
    if cluster_map.shape != instances.labels.shape or \
            cluster_map.shape != normals.validity.shape:
        raise ShapeError("cluster map, instances, and normals must share size")

    masks: list[PlaneMask2D] = []
    usable = (cluster_map >= 0) & (instances.labels > 0) & normals.validity
    cluster_ids = np.unique(cluster_map[usable])
    for cid in cluster_ids:
        in_cluster = usable & (cluster_map == cid)
        for label in np.unique(instances.labels[in_cluster]):
            region = in_cluster & (instances.labels == label)
            components, count = ndimage.label(region, structure=_CC_STRUCTURE)
            for comp in range(1, count + 1):
                mask = components == comp
                if int(mask.sum()) < min_mask_pixels:
                    continue
                mean = normals.values[mask].sum(axis=0)
                norm = np.linalg.norm(mean)
                if norm < 1e-12:
                    continue  # perfectly cancelling normals: not a plane
                masks.append(PlaneMask2D(view_id=view_id, mask=mask,
                                         mean_normal=mean / norm,
                                         instance_label=int(label)))
    return masks


def default_min_mask_pixels(width: int, height: int,
                            fraction: float = 0.005) -> int:
    """Size threshold as a fraction of the image area (default 0.5%)."""
    return max(1, int(np.ceil(width * height * fraction)))
