"""Reconstruction quality metrics: Chamfer distance, F-score, and normal
consistency over L1 nearest neighbors.

Distances are L1 in the cloud's units (meters here); F-score and normal
consistency are reported in percent.  The F-score threshold defaults to
5 cm.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .core import PointCloud
from .errors import InputError

__all__ = ["ReconstructionMetrics", "eval_reconstruction"]


@dataclass(frozen=True)
class ReconstructionMetrics:
    chamfer: float               # (accuracy + completeness) / 2, meters
    fscore: float                # percent
    normal_consistency: float | None  # percent, None without normals
    accuracy: float
    completeness: float
    precision: float             # fraction in [0, 1]
    recall: float
    normal_accuracy: float | None
    normal_completeness: float | None

    def as_dict(self) -> dict:
        return {
            "chamfer": self.chamfer,
            "fscore": self.fscore,
            "normal_consistency": self.normal_consistency,
            "accuracy": self.accuracy,
            "completeness": self.completeness,
            "precision": self.precision,
            "recall": self.recall,
            "normal_accuracy": self.normal_accuracy,
            "normal_completeness": self.normal_completeness,
        }


def eval_reconstruction(pred: PointCloud, gt: PointCloud,
                        fscore_thresh: float = 0.05) -> ReconstructionMetrics:
    """Nearest-neighbor reconstruction metrics between two point clouds.

    Accuracy is the mean L1 distance from predicted points to their nearest
    ground-truth point, completeness the reverse; precision/recall count
    distances strictly below ``fscore_thresh``.  Normal consistency averages
    the dot products at the matched nearest neighbors and needs normals on
    both clouds.

    Raises:
        InputError: Either cloud is empty.
    """
    if len(pred) == 0 or len(gt) == 0:
        raise InputError("reconstruction metrics need non-empty clouds")
    d_pred, idx_pred = cKDTree(gt.points).query(pred.points, p=1)
    d_gt, idx_gt = cKDTree(pred.points).query(gt.points, p=1)

    accuracy = float(np.mean(d_pred))
    completeness = float(np.mean(d_gt))
    precision = float(np.mean(d_pred < fscore_thresh))
    recall = float(np.mean(d_gt < fscore_thresh))
    fscore = 0.0 if precision + recall == 0 else \
        100.0 * 2.0 * precision * recall / (precision + recall)

    normal_accuracy = normal_completeness = normal_consistency = None
    if pred.normals is not None and gt.normals is not None:
        normal_accuracy = float(np.mean(
            np.sum(pred.normals * gt.normals[idx_pred], axis=1)))
        normal_completeness = float(np.mean(
            np.sum(gt.normals * pred.normals[idx_gt], axis=1)))
        normal_consistency = 100.0 * (normal_accuracy +
                                      normal_completeness) / 2.0

    return ReconstructionMetrics(
        chamfer=(accuracy + completeness) / 2.0,
        fscore=fscore,
        normal_consistency=normal_consistency,
        accuracy=accuracy,
        completeness=completeness,
        precision=precision,
        recall=recall,
        normal_accuracy=normal_accuracy,
        normal_completeness=normal_completeness,
    )
