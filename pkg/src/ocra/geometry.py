"""Rigid transforms, pinhole cameras, point clouds and depth back-projection.

Rotations are stored row-major as 3x3 arrays, translations as 3-vectors,
all in meters and radians. A transform maps a point ``p`` to ``R @ p + t``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import reduce

import numpy as np

from .errors import DegenerateRotation, DimensionMismatch, DataError

POSE_DIM = 9
_COLLINEAR_ANGLE = 1e-6


@dataclass(frozen=True, eq=False)
class Se3Transform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise DataError("transform has non-finite entries")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Se3Transform:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> Se3Transform:
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_translation(cls, t) -> Se3Transform:
        return cls(np.eye(3), t)

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> Se3Transform:
        return cls(so3_exp(rotvec), translation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        """Map an (N, 3) array (or a single 3-vector) through the transform."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def inverse(self) -> Se3Transform:
        return se3_inverse(self)

    def __matmul__(self, other: Se3Transform) -> Se3Transform:
        return se3_compose(self, other)

    def is_valid(self, tol: float = 1e-9) -> bool:
        R = self.rotation
        ortho = np.linalg.norm(R.T @ R - np.eye(3))
        return bool(ortho <= tol and abs(np.linalg.det(R) - 1.0) <= tol)

    def allclose(self, other: Se3Transform, atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.matrix()[:3], other.matrix()[:3], rtol=0.0, atol=atol))

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d) -> Se3Transform:
        return cls(d["rotation"], d["translation"])

    def __repr__(self):
        return f"Se3Transform(angle={rotation_angle(self):.6g} rad, t={self.translation.tolist()})"


def se3_compose(a: Se3Transform, b: Se3Transform) -> Se3Transform:
    """Return ``a @ b``: apply ``b`` first, then ``a``."""
    return Se3Transform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def se3_inverse(a: Se3Transform) -> Se3Transform:
    Rt = a.rotation.T
    return Se3Transform(Rt, -Rt @ a.translation)


def compose_all(transforms) -> Se3Transform:
    return reduce(se3_compose, transforms, Se3Transform.identity())


def skew(w) -> np.ndarray:
    x, y, z = w
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(rotvec) -> np.ndarray:
    """Rodrigues' formula."""
    w = np.asarray(rotvec, dtype=float)
    theta = np.linalg.norm(w)
    K = skew(w)
    if theta < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    return np.eye(3) + np.sin(theta) / theta * K + (1 - np.cos(theta)) / theta**2 * K @ K


def so3_log(R) -> np.ndarray:
    """Rotation vector of ``R`` (angle in [0, pi])."""
    R = np.asarray(R, dtype=float)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    theta = rotation_angle(R)
    if theta < 1e-8:
        return w / 2.0
    if np.pi - theta < 1e-3:
        # sin(theta) is tiny: recover a a^T from the symmetric part, where
        # R + R^T = 2 cos I + 2 (1 - cos) a a^T, and take the sign from w
        c = np.cos(theta)
        aat = ((R + R.T) / 2.0 - c * np.eye(3)) / (1.0 - c)
        i = int(np.argmax(np.diag(aat)))
        axis = aat[i] / np.sqrt(aat[i, i])
        axis /= np.linalg.norm(axis)
        if axis @ w < 0:
            axis = -axis
        return theta * axis
    return theta / (2.0 * np.sin(theta)) * w


def rotation_angle(T) -> float:
    """Geodesic angle of the rotation part, in radians."""
    R = T.rotation if isinstance(T, Se3Transform) else np.asarray(T)
    # atan2 form stays accurate near 0 and pi
    s = np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.arctan2(s, c))


def random_transform(rng: np.random.Generator, max_angle=np.pi, max_translation=1.0) -> Se3Transform:
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle)
    t = rng.uniform(-max_translation, max_translation, size=3)
    return Se3Transform(so3_exp(axis * angle), t)


def pose_encode(T: Se3Transform) -> np.ndarray:
    """Flatten a transform to (tx, ty, tz, r11, r21, r31, r12, r22, r32)."""
    return np.concatenate([T.translation, T.rotation[:, 0], T.rotation[:, 1]])


def pose_decode(v) -> Se3Transform:
    """Inverse of :func:`pose_encode` for arbitrary (non-orthonormal) inputs.

    The two rotation columns are Gram-Schmidt orthonormalized and the third
    completed by a cross product, so any 6-vector with non-collinear halves
    maps to a proper rotation.
    """
    v = np.asarray(v, dtype=float)
    if v.shape != (POSE_DIM,):
        raise DimensionMismatch(f"pose vector must have shape (9,), got {v.shape}")
    a1, a2 = v[3:6], v[6:9]
    n1, n2 = np.linalg.norm(a1), np.linalg.norm(a2)
    if n1 == 0.0 or n2 == 0.0 or not np.isfinite(n1 * n2):
        raise DegenerateRotation("rotation6d half has zero or non-finite norm")
    sin = np.linalg.norm(np.cross(a1, a2)) / (n1 * n2)
    if np.arcsin(min(sin, 1.0)) <= _COLLINEAR_ANGLE:
        raise DegenerateRotation("rotation6d halves are collinear")
    b1 = a1 / n1
    u2 = a2 - (b1 @ a2) * b1
    b2 = u2 / np.linalg.norm(u2)
    b3 = np.cross(b1, b2)
    return Se3Transform(np.stack([b1, b2, b3], axis=1), v[:3])


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: Se3Transform = field(default_factory=Se3Transform.identity)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise DataError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise DataError("principal point must lie inside the image")

    def project(self, points_world):
        """World points -> (u, v, depth) in pixel coordinates."""
        pc = self.pose.inverse().apply(np.atleast_2d(points_world))
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * pc[:, 0] / z + self.cx
            v = self.fy * pc[:, 1] / z + self.cy
        return u, v, z

    def rays(self) -> np.ndarray:
        """Camera-frame ray directions with unit z for every pixel, shape (H, W, 3)."""
        v, u = np.mgrid[0:self.height, 0:self.width].astype(float)
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height, "pose": self.pose.to_dict()}

    @classmethod
    def from_dict(cls, d) -> CameraModel:
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]), Se3Transform.from_dict(d["pose"]))


@dataclass(frozen=True, eq=False)
class DepthMap:
    values: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.values, dtype=float)
        if d.ndim != 2:
            raise DimensionMismatch("depth map must be 2-D")
        if not np.all(np.isfinite(d)) or np.any(d < 0):
            raise DataError("depth must be finite and non-negative")
        object.__setattr__(self, "values", d)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True, eq=False)
class Mask:
    bits: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bits)
        if b.ndim != 2:
            raise DimensionMismatch("mask must be 2-D")
        object.__setattr__(self, "bits", b.astype(bool))

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]


MANIPULATED = 1
CONTEXT = 0


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        p = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(p)):
            raise DataError("point cloud contains NaN/Inf")
        if self.labels is None:
            lab = np.zeros(len(p), dtype=np.uint8)
        else:
            lab = np.asarray(self.labels).reshape(-1)
            if lab.shape[0] != p.shape[0]:
                raise DimensionMismatch("labels and points differ in length")
            if not np.all((lab == 0) | (lab == 1)):
                raise DataError("labels must be 0 or 1")
            lab = lab.astype(np.uint8)
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "labels", lab)

    def __len__(self):
        return len(self.points)

    @classmethod
    def empty(cls) -> PointCloud:
        return cls(np.zeros((0, 3)))

    def select(self, label: int) -> PointCloud:
        keep = self.labels == label
        return PointCloud(self.points[keep], self.labels[keep])

    @staticmethod
    def concat(clouds) -> PointCloud:
        clouds = list(clouds)
        if not clouds:
            return PointCloud.empty()
        return PointCloud(np.concatenate([c.points for c in clouds]),
                          np.concatenate([c.labels for c in clouds]))


def backproject(depth: DepthMap, mask: Mask, cam: CameraModel, label: int) -> PointCloud:
    """Lift masked pixels with valid depth into world coordinates.

    Pixels with zero depth are holes and are dropped.
    """
    if (depth.height, depth.width) != (cam.height, cam.width) or \
            (mask.height, mask.width) != (cam.height, cam.width):
        raise DimensionMismatch(
            f"depth {depth.values.shape} / mask {mask.bits.shape} do not match camera "
            f"{(cam.height, cam.width)}")
    d = depth.values
    vs, us = np.nonzero(mask.bits & (d > 0))
    z = d[vs, us]
    pc = np.stack([(us - cam.cx) * z / cam.fx, (vs - cam.cy) * z / cam.fy, z], axis=1)
    return PointCloud(cam.pose.apply(pc), np.full(len(z), label, dtype=np.uint8))


def transform_cloud(T: Se3Transform, c: PointCloud) -> PointCloud:
    return PointCloud(T.apply(c.points), c.labels)
