"""Deterministic object and tactile featurizers plus ResFiLM fusion.

The featurizers are fixed (seeded) maps rather than learned networks; any
callable with the same signature can replace them. ResFiLM is the only
trainable piece here and comes with an exact reverse pass.
"""
from __future__ import annotations

import numpy as np

from .errors import DimensionMismatch, EmptyManipCloud, MissingCache
from .geometry import PointCloud

DEFAULT_DIM = 64
DESCRIPTOR_DIM = 32
OCCUPANCY_BINS = 4
OCCUPANCY_POOLED = 13
TACTILE_GRID = 4

_OCCUPANCY_SEED = 0x0C0A
_GEOM_SEED = 0x0C0B
_TACTILE_SEED = 0x0C0C


def _fixed_map(seed: int, rows: int, cols: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((rows, cols)) / np.sqrt(cols)


_OCCUPANCY_MAP = _fixed_map(_OCCUPANCY_SEED, OCCUPANCY_POOLED, OCCUPANCY_BINS ** 3)


def sorted_points(points) -> np.ndarray:
    """Lexicographic (x, y, z) order; fixes the summation order for bitwise
    permutation invariance."""
    p = np.asarray(points, dtype=float)
    return p[np.lexsort((p[:, 2], p[:, 1], p[:, 0]))]


def cloud_descriptor(points) -> np.ndarray:
    """32-value shape summary of one object cloud (zeros if empty).

    Layout: centroid (3), PCA eigenvalues descending (3), PCA axes as
    columns (9), bounding-box extents (3), log1p(count) (1), pooled 4x4x4
    occupancy (13).
    """
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(p) == 0:
        return np.zeros(DESCRIPTOR_DIM)
    p = sorted_points(p)
    n = len(p)
    centroid = p.sum(axis=0) / n
    q = p - centroid
    cov = q.T @ q / n
    evals, evecs = np.linalg.eigh(cov)
    evals, evecs = evals[::-1], evecs[:, ::-1]
    # sign convention: largest-magnitude entry of each axis is positive
    idx = np.argmax(np.abs(evecs), axis=0)
    evecs = evecs * np.sign(evecs[idx, np.arange(3)])
    lo, hi = p.min(axis=0), p.max(axis=0)
    extent = hi - lo
    safe = np.where(extent > 0, extent, 1.0)
    cells = np.minimum((OCCUPANCY_BINS * (p - lo) / safe).astype(int), OCCUPANCY_BINS - 1)
    flat = (cells[:, 0] * OCCUPANCY_BINS + cells[:, 1]) * OCCUPANCY_BINS + cells[:, 2]
    hist = np.bincount(flat, minlength=OCCUPANCY_BINS ** 3) / n
    return np.concatenate([centroid, evals, evecs.T.reshape(-1), extent,
                           [np.log1p(n)], _OCCUPANCY_MAP @ hist])


def geom_features(manip: PointCloud, ctx: PointCloud, dim: int = DEFAULT_DIM) -> np.ndarray:
    if len(manip) == 0:
        raise EmptyManipCloud("manipulated-object cloud is empty")
    desc = np.concatenate([cloud_descriptor(manip.points), cloud_descriptor(ctx.points)])
    return _fixed_map(_GEOM_SEED + dim, dim, 2 * DESCRIPTOR_DIM) @ desc


def grid_pool(field, grid: int = TACTILE_GRID) -> np.ndarray:
    """Mean 3-vector of each cell of a ``grid x grid`` partition, row-major."""
    f = np.asarray(field, dtype=float)
    h, w = f.shape[:2]
    rows = [h * i // grid for i in range(grid + 1)]
    cols = [w * j // grid for j in range(grid + 1)]
    out = []
    for i in range(grid):
        for j in range(grid):
            out.append(f[rows[i]:rows[i + 1], cols[j]:cols[j + 1]].reshape(-1, f.shape[2]).mean(axis=0))
    return np.concatenate(out)


def tactile_features(left, right, dim: int = DEFAULT_DIM) -> np.ndarray:
    pooled = np.concatenate([grid_pool(left), grid_pool(right)])
    return _fixed_map(_TACTILE_SEED + dim, dim, pooled.size) @ pooled


def init_resfilm(dim: int, rng: np.random.Generator, film_scale: float = 0.01) -> dict:
    """FiLM generator starts near (gamma=1, beta=0), projector at identity and
    the gate closed, so training begins from the vision-only policy."""
    return {
        "film.W": rng.standard_normal((2 * dim, dim)) * film_scale,
        "film.b": np.concatenate([np.ones(dim), np.zeros(dim)]),
        "proj.W": np.eye(dim),
        "alpha": np.array(0.0),
    }


def resfilm_fuse(f_pc, f_t, p: dict):
    """``f_oc = f_pc + alpha * (gamma * (P f_t) + beta)`` with ``(gamma, beta)``
    produced by an affine map of ``f_pc``. Batched over leading axes.

    Returns ``(f_oc, cache)``.
    """
    f_pc = np.asarray(f_pc, dtype=float)
    f_t = np.asarray(f_t, dtype=float)
    d = p["proj.W"].shape[0]
    if f_pc.shape != f_t.shape or f_pc.shape[-1] != d:
        raise DimensionMismatch(f"f_pc {f_pc.shape} / f_t {f_t.shape} vs fusion width {d}")
    gb = f_pc @ p["film.W"].T + p["film.b"]
    gamma, beta = gb[..., :d], gb[..., d:]
    ft_proj = f_t @ p["proj.W"].T
    mod = gamma * ft_proj + beta
    if p["alpha"] == 0.0:
        out = f_pc.copy()
    else:
        out = f_pc + p["alpha"] * mod
    cache = {"f_pc": f_pc, "f_t": f_t, "gamma": gamma, "ft_proj": ft_proj, "mod": mod}
    return out, cache


def resfilm_backward(grad_out, cache, p: dict):
    """Exact gradients of :func:`resfilm_fuse`.

    Returns ``(param_grads, grad_f_pc, grad_f_t)``; parameter gradients are
    summed over the batch axes.
    """
    if cache is None:
        raise MissingCache("resfilm_backward needs the cache from resfilm_fuse")
    g = np.asarray(grad_out, dtype=float)
    d = p["proj.W"].shape[0]
    a = p["alpha"]
    g2 = g.reshape(-1, d)
    f_pc = cache["f_pc"].reshape(-1, d)
    f_t = cache["f_t"].reshape(-1, d)
    gamma = cache["gamma"].reshape(-1, d)
    ft_proj = cache["ft_proj"].reshape(-1, d)
    mod = cache["mod"].reshape(-1, d)

    d_gamma = a * g2 * ft_proj
    d_beta = a * g2
    d_gb = np.concatenate([d_gamma, d_beta], axis=1)
    d_ftp = a * g2 * gamma
    grads = {
        "film.W": d_gb.T @ f_pc,
        "film.b": d_gb.sum(axis=0),
        "proj.W": d_ftp.T @ f_t,
        "alpha": np.array(np.sum(g2 * mod)),
    }
    grad_f_pc = (g2 + d_gb @ p["film.W"]).reshape(g.shape)
    grad_f_t = (d_ftp @ p["proj.W"]).reshape(g.shape)
    return grads, grad_f_pc, grad_f_t
