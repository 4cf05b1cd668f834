"""Trimmed ICP (point-to-point or point-to-plane) for frame-to-frame object motion."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError, DegenerateGeometry, EmptyCorrespondenceSet, NumericalError
from .geometry import PointCloud, Se3Transform, so3_exp, so3_log

METRICS = ("point_to_point", "point_to_plane")


class KdTree3:
    """Exact nearest-neighbour index over an (N, 3) point set."""

    def __init__(self, points):
        self.points = np.asarray(points, dtype=float).reshape(-1, 3)
        self._tree = cKDTree(self.points, balanced_tree=True, compact_nodes=True)

    def nearest(self, queries):
        """Return ``(distances, indices)`` of the nearest stored point."""
        return self._tree.query(np.asarray(queries, dtype=float).reshape(-1, 3), k=1)


def estimate_normals(points, k: int = 12, tree: KdTree3 | None = None) -> np.ndarray:
    """Unit normals from the smallest principal axis of each point's ``k``
    nearest neighbours (sign arbitrary)."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    k = int(min(max(k, 3), len(pts)))
    tree = tree or KdTree3(pts)
    _, idx = tree._tree.query(pts, k=k)
    nb = pts[idx] - pts[idx].mean(axis=1, keepdims=True)
    _, vecs = np.linalg.eigh(np.einsum("nki,nkj->nij", nb, nb))
    return vecs[:, :, 0]


def point_to_plane_step(src_pts, dst_pts, normals) -> np.ndarray:
    """Linearized least-squares twist ``(w, v)`` minimizing
    ``sum(((p + w x p + v - q) . n)^2)``."""
    A = np.hstack([np.cross(src_pts, normals), normals])
    b = np.einsum("ij,ij->i", dst_pts - src_pts, normals)
    return np.linalg.lstsq(A, b, rcond=None)[0]


@dataclass
class IcpParams:
    max_iterations: int = 50
    tolerance: float = 1e-6
    max_corr_dist: float = 0.05
    trim_fraction: float = 0.1
    accelerate: bool = True
    trim_warmup: int = 10
    metric: str = "point_to_point"      # or "point_to_plane"
    normal_neighbors: int = 12

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ConfigError(f"unknown ICP metric {self.metric!r} (expected one of {METRICS})")
        if self.max_iterations < 1 or not 0.0 <= self.trim_fraction < 1.0 or self.max_corr_dist <= 0:
            raise ConfigError("ICP needs max_iterations >= 1, 0 <= trim_fraction < 1, max_corr_dist > 0")


@dataclass
class IcpResult:
    transform: Se3Transform
    rms_residual: float
    iterations: int
    converged: bool
    history: list = field(default_factory=list)


def kabsch_align(src_pts, dst_pts, weights=None) -> Se3Transform:
    """Weighted least-squares rigid transform taking ``src`` onto ``dst``.

    Reflections are corrected so the result is always a proper rotation.
    """
    src = np.asarray(src_pts, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst_pts, dtype=float).reshape(-1, 3)
    if len(src) != len(dst) or len(src) < 3:
        raise DegenerateGeometry(f"need >= 3 paired points, got {len(src)} / {len(dst)}")
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=float)
    if np.any(w < 0) or w.sum() <= 0:
        raise DegenerateGeometry("weights must be non-negative and not all zero")
    w = w / w.sum()
    mu_s = w @ src
    mu_d = w @ dst
    H = (src - mu_s).T @ ((dst - mu_d) * w[:, None])
    U, S, Vt = np.linalg.svd(H)
    if S[1] <= 1e-12 * max(S[0], 1e-300):
        raise DegenerateGeometry("cross-covariance rank < 2 (collinear points)")
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
    R = Vt.T @ D @ U.T
    return Se3Transform(R, mu_d - R @ mu_s)


def _as_vector(T: Se3Transform) -> np.ndarray:
    """(rotation vector, translation) coordinates of a pose."""
    return np.concatenate([so3_log(T.rotation), T.translation])


def _from_vector(q) -> Se3Transform:
    return Se3Transform(so3_exp(q[:3]), q[3:])


def _aligned(d1, d0, max_angle) -> bool:
    n1, n0 = np.linalg.norm(d1), np.linalg.norm(d0)
    if n1 < 1e-15 or n0 < 1e-15:
        return False
    return bool(d1 @ d0 >= np.cos(max_angle) * n1 * n0)


def icp_align(src: PointCloud, dst: PointCloud, params: IcpParams | None = None,
              init: Se3Transform | None = None, tree: KdTree3 | None = None) -> IcpResult:
    """Register ``src`` onto ``dst``; the result maps src coordinates into dst.

    Objective: mean of the kept (untrimmed) truncated squared residuals
    ``min(r^2, max_corr_dist^2)``, where ``r`` is the distance to the nearest
    dst point (``point_to_point``) or to that point's tangent plane
    (``point_to_plane``); ``rms_residual`` is its square root. Each
    iteration matches nearest neighbours, fits the kept inliers (closed-form
    :func:`kabsch_align`, or a linearized plane-distance solve with step
    halving) and composes the update.

    Two additions keep the iteration from crawling:

    * the trimmed fraction ramps up from 0 over ``trim_warmup`` iterations, so
      early iterations are not blind to the far points that carry the
      largest corrections;
    * with ``accelerate``, when two successive updates point the same way
      (within 10 degrees in (rotation vector, translation) space) the step is
      extrapolated by factors 2, 4, 8, ... while the objective keeps falling.

    Both preserve the guarantee that the objective never increases, which
    is asserted every iteration.

    Point-to-point is the default. On clouds resampled on a common voxel
    lattice its minimum is pulled toward lattice-aligning poses (sub-degree
    to degree-level bias on a few-centimetre object at 2 mm voxels); the
    plane metric does not reward in-plane lattice alignment and avoids it.
    """
    params = params or IcpParams()
    if len(src) < 3 or len(dst) < 3:
        raise DegenerateGeometry("both clouds need at least 3 points")
    tree = tree or KdTree3(dst.points)
    plane = params.metric == "point_to_plane"
    normals = estimate_normals(dst.points, params.normal_neighbors, tree) if plane else None
    cap = params.max_corr_dist ** 2
    warm = max(0, int(params.trim_warmup))

    def keep_count(it):
        frac = params.trim_fraction * min(1.0, (it - 1) / warm) if warm else params.trim_fraction
        return max(3, int(np.ceil((1.0 - frac) * len(src))))

    def evaluate(T, n_keep):
        moved = T.apply(src.points)
        dist, idx = tree.nearest(moved)
        if plane:
            r = np.einsum("ij,ij->i", moved - dst.points[idx], normals[idx])
            cost = np.minimum(r * r, cap)
        else:
            cost = np.minimum(dist * dist, cap)
        keep = np.argsort(cost, kind="stable")[:n_keep]
        return float(cost[keep].mean()), moved, dist, idx, keep

    T = init or Se3Transform.identity()
    J, moved, dist, idx, keep = evaluate(T, keep_count(1))
    history = [J]
    prev_delta = None
    converged = False
    it = 0
    while it < params.max_iterations:
        it += 1
        if J <= 1e-24:
            converged = True
            break
        inliers = keep[dist[keep] < params.max_corr_dist]
        if len(inliers) < 3:
            raise EmptyCorrespondenceSet(
                f"only {len(inliers)} correspondences within {params.max_corr_dist} m")
        T_old, q_old = T, _as_vector(T)
        n_keep = keep_count(it + 1)
        if plane:
            x = point_to_plane_step(moved[inliers], dst.points[idx[inliers]], normals[idx[inliers]])
            step, state = 1.0, None
            while step >= 1.0 / 64.0:
                cand = Se3Transform(so3_exp(step * x[:3]), step * x[3:]) @ T_old
                cand_state = evaluate(cand, n_keep)
                if cand_state[0] <= J:
                    T, state = cand, cand_state
                    break
                step *= 0.5
            if state is None:
                # no descent along the linearized step: a fixed point
                history.append(J)
                converged = True
                break
        else:
            T = kabsch_align(moved[inliers], dst.points[idx[inliers]]) @ T_old
            state = evaluate(T, n_keep)
            if state[0] > J:
                # only possible through rounding once converged: keep the old pose
                T = T_old
                history.append(J)
                converged = True
                break
        delta = _as_vector(T) - q_old
        if params.accelerate and prev_delta is not None and _aligned(delta, prev_delta, np.deg2rad(10.0)):
            m = 2.0
            while m <= 64.0:
                cand = _from_vector(q_old + m * delta)
                cand_state = evaluate(cand, n_keep)
                if not cand_state[0] < state[0]:
                    break
                T, state = cand, cand_state
                m *= 2.0
            delta = _as_vector(T) - q_old
        prev_delta = delta
        J_prev = J
        J, moved, dist, idx, keep = state
        if J > J_prev * (1.0 + 1e-9) + 1e-18:
            raise NumericalError(f"ICP residual increased at iteration {it}: {J_prev} -> {J}")
        history.append(J)
        if J <= 1e-24 or (it >= warm and J_prev - J <= params.tolerance * J_prev):
            converged = True
            break
    return IcpResult(T, float(np.sqrt(J)), it, converged, history)


def track_sequence(clouds, params: IcpParams | None = None, warm_start: bool = True,
                   full_results: bool = False) -> list:
    """Per-step transforms ``T_t`` with ``T_t * P_t ~ P_{t+1}``.

    Each pair is warm-started from the previous estimate unless
    ``warm_start`` is off. Errors are re-raised with the index of the
    failing frame pair. ``full_results`` returns the :class:`IcpResult`
    objects instead of bare transforms.
    """
    clouds = list(clouds)
    if len(clouds) < 2:
        raise EmptyCorrespondenceSet("need at least two frames to track")
    out = []
    prev = None
    for t in range(len(clouds) - 1):
        try:
            res = icp_align(clouds[t], clouds[t + 1], params, init=prev if warm_start else None)
        except (DegenerateGeometry, EmptyCorrespondenceSet, NumericalError) as e:
            raise type(e)(f"frame {t} -> {t + 1}: {e}") from e
        out.append(res)
        prev = res.transform
    return out if full_results else [r.transform for r in out]
