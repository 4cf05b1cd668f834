"""Metric scale recovery for up-to-scale reconstructions and two-view fusion."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DataError, DegenerateBaseline
from .geometry import DepthMap, PointCloud, Se3Transform, rotation_angle

VOXEL_SIZE = 0.002
BASELINE_MIN = 1e-6
ROTATION_WARN_DEG = 2.0


class RotationDiscrepancy(UserWarning):
    """Predicted and measured relative rotations disagree by more than the warning threshold."""


@dataclass(frozen=True)
class ScaleCalibration:
    scale: float
    rotation_discrepancy: float = 0.0      # radians, diagnostic only

    def __post_init__(self):
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise DataError(f"scale must be positive and finite, got {self.scale}")


def relative_pose(a: Se3Transform, b: Se3Transform) -> Se3Transform:
    """Pose of camera ``b`` expressed in camera ``a``'s frame."""
    return a.inverse() @ b


def calibrate_scale(predicted_relative: Se3Transform, measured_relative: Se3Transform,
                    warn_deg: float = ROTATION_WARN_DEG) -> ScaleCalibration:
    """Meters per reconstruction unit from the ratio of baseline lengths.

    Rotation carries no scale information; its disagreement is returned as
    a health metric and triggers a :class:`RotationDiscrepancy` warning above
    ``warn_deg``.
    """
    tp = np.linalg.norm(predicted_relative.translation)
    if not tp > BASELINE_MIN:
        raise DegenerateBaseline(f"predicted baseline {tp:.3g} is below {BASELINE_MIN}")
    scale = float(np.linalg.norm(measured_relative.translation) / tp)
    disc = rotation_angle(predicted_relative.rotation.T @ measured_relative.rotation)
    if np.rad2deg(disc) > warn_deg:
        warnings.warn(f"relative rotation discrepancy {np.rad2deg(disc):.2f} deg exceeds "
                      f"{warn_deg} deg", RotationDiscrepancy)
    return ScaleCalibration(scale, disc)


def apply_scale(depth: DepthMap, cal: ScaleCalibration) -> DepthMap:
    """Multiply every pixel by the scale; holes (0) stay 0."""
    return DepthMap(depth.values * cal.scale)


def voxel_keys(points, voxel: float = VOXEL_SIZE) -> np.ndarray:
    return np.floor(np.asarray(points, dtype=float) / voxel).astype(np.int64)


def voxelize(cloud: PointCloud, voxel: float = VOXEL_SIZE) -> PointCloud:
    """One point per occupied voxel: the centroid of its members, with the
    majority label (ties go to context, label 0). Output is ordered by voxel
    index so the result does not depend on input order beyond summation."""
    if len(cloud) == 0:
        return PointCloud.empty()
    keys = voxel_keys(cloud.points, voxel)
    uniq, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(uniq), 3))
    np.add.at(sums, inverse, cloud.points)
    ones = np.bincount(inverse, weights=cloud.labels.astype(float), minlength=len(uniq))
    labels = (2 * ones > counts).astype(np.uint8)
    return PointCloud(sums / counts[:, None], labels)


def fuse_views(c1: PointCloud, c2: PointCloud, voxel: float = VOXEL_SIZE) -> PointCloud:
    """Concatenate two world-frame clouds and deduplicate on the voxel grid."""
    return voxelize(PointCloud.concat([c1, c2]), voxel)
