"""Tactile displacement estimation (Dense Inverse Search) and force decoupling.

Flow follows the convention ``current(p + flow(p)) = reference(p)``: it maps
reference pixels to where their content moved in the current frame.
Component 0 is horizontal (x, columns), component 1 vertical (y, rows).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve1d, map_coordinates

from .errors import DataError, DimensionMismatch, InsufficientTexture

FORCE_HEIGHT, FORCE_WIDTH = 240, 320
TEXTURE_THRESHOLD = 1e-3


@dataclass(frozen=True, eq=False)
class GrayImage:
    pixels: np.ndarray

    def __post_init__(self):
        p = np.array(self.pixels, dtype=float)
        if p.ndim != 2 or not np.all(np.isfinite(p)):
            raise DataError("gray image must be a finite 2-D array")
        if p.min(initial=0.0) < 0.0 or p.max(initial=0.0) > 1.0:
            raise DataError("gray image values must lie in [0, 1]")
        p.flags.writeable = False
        object.__setattr__(self, "pixels", p)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True, eq=False)
class FlowField:
    """H x W x 2 displacement field plus the texture diagnostic of its source."""
    vectors: np.ndarray
    insufficient_texture: bool = False

    def __post_init__(self):
        v = np.array(self.vectors, dtype=float)
        if v.ndim != 3 or v.shape[2] != 2 or not np.all(np.isfinite(v)):
            raise DataError(f"flow must be a finite H x W x 2 array, got shape {v.shape}")
        object.__setattr__(self, "vectors", v)


@dataclass(frozen=True)
class DisParams:
    levels: int = 4
    patch_size: int = 8
    patch_stride: int = 4
    grad_descent_iters: int = 12
    variational_refine: bool = False
    variational_alpha: float = 0.05
    variational_outer: int = 3
    variational_inner: int = 20


@dataclass(frozen=True, eq=False)
class ForceCalibration:
    tangential_gain: np.ndarray = None
    normal_gain: float = 1.0

    def __post_init__(self):
        G = np.eye(2) if self.tangential_gain is None else np.array(self.tangential_gain, dtype=float)
        if G.shape != (2, 2) or not np.all(np.isfinite(G)) or abs(np.linalg.det(G)) < 1e-12:
            raise DataError("tangential_gain must be a finite, invertible 2 x 2 matrix")
        if not np.isfinite(self.normal_gain):
            raise DataError("normal_gain must be finite")
        object.__setattr__(self, "tangential_gain", G)


def _pixels(img) -> np.ndarray:
    return img.pixels if isinstance(img, GrayImage) else GrayImage(img).pixels


def _vectors(flow) -> np.ndarray:
    return flow.vectors if isinstance(flow, FlowField) else FlowField(flow).vectors


_BINOMIAL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def downsample2(img) -> np.ndarray:
    """Halve resolution by 2 x 2 block averaging."""
    h, w = img.shape[:2]
    return img.reshape(h // 2, 2, w // 2, 2, *img.shape[2:]).mean(axis=(1, 3))


def build_pyramid(img, levels: int) -> list:
    """Level 0 is the input; each coarser level is a binomial blur followed by
    2 x 2 block averaging, which widens the capture range of the patch search."""
    pyr = [np.asarray(img, dtype=float)]
    for _ in range(levels - 1):
        smooth = convolve1d(convolve1d(pyr[-1], _BINOMIAL, axis=0, mode="reflect"),
                            _BINOMIAL, axis=1, mode="reflect")
        pyr.append(downsample2(smooth))
    return pyr


def sample(img, x, y) -> np.ndarray:
    """Bilinear lookup at float pixel coordinates (edge values repeat outside)."""
    return map_coordinates(img, [y, x], order=1, mode="nearest")


def warp_back(current, flow) -> np.ndarray:
    """``current(p + flow(p))`` on the pixel grid: ``current`` pulled back onto the
    reference frame."""
    h, w = current.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    return sample(current, xx + flow[..., 0], yy + flow[..., 1])


def _patch_origins(size: int, patch: int, stride: int) -> np.ndarray:
    o = list(range(0, size - patch + 1, stride))
    if o[-1] != size - patch:
        o.append(size - patch)
    return np.array(o)


def _level_flow(ref, cur, init_flow, patch, stride, iters):
    """One pyramid level: inverse-compositional patch search, then densify."""
    h, w = ref.shape
    p = min(patch, h, w)
    oy, ox = np.meshgrid(_patch_origins(h, p, stride), _patch_origins(w, p, stride), indexing="ij")
    oy, ox = oy.ravel(), ox.ravel()
    dy, dx = np.mgrid[0:p, 0:p]
    py = oy[:, None] + dy.ravel()[None, :]          # (n_patches, p*p)
    px = ox[:, None] + dx.ravel()[None, :]

    gy, gx = np.gradient(ref)
    T = ref[py, px]
    Tx, Ty = gx[py, px], gy[py, px]
    H = np.stack([np.stack([(Tx * Tx).sum(1), (Tx * Ty).sum(1)], -1),
                  np.stack([(Tx * Ty).sum(1), (Ty * Ty).sum(1)], -1)], -2)
    H = H + 1e-9 * np.eye(2)
    Hinv = np.linalg.inv(H)

    c = p // 2
    u0 = init_flow[oy + c, ox + c].copy()          # (n_patches, 2)
    u = u0.copy()

    def ssd(uv):
        r = sample(cur, px + uv[:, 0:1], py + uv[:, 1:2]) - T
        return r, (r * r).sum(1)

    _, err0 = ssd(u0)
    for _ in range(iters):
        r, _ = ssd(u)
        b = np.stack([(Tx * r).sum(1), (Ty * r).sum(1)], -1)
        u = u - np.einsum("nij,nj->ni", Hinv, b)
    _, err = ssd(u)
    # reset patches whose error grew or that ran off further than a patch width
    worse = ~(err <= err0) | (np.linalg.norm(u - u0, axis=1) > p)
    u[worse] = u0[worse]

    # densify: each covering patch votes with weight 1 / max(1, |error|) (8-bit scale)
    res = np.abs(sample(cur, px + u[:, 0:1], py + u[:, 1:2]) - T) * 255.0
    wgt = 1.0 / np.maximum(1.0, res)
    num = np.zeros((h, w, 2))
    den = np.zeros((h, w))
    np.add.at(den, (py, px), wgt)
    np.add.at(num[..., 0], (py, px), wgt * u[:, 0:1])
    np.add.at(num[..., 1], (py, px), wgt * u[:, 1:2])
    return num / den[..., None]


def _box4(a):
    """Mean of the 4-neighbourhood with replicated borders."""
    q = np.pad(a, 1, mode="edge")
    return 0.25 * (q[:-2, 1:-1] + q[2:, 1:-1] + q[1:-1, :-2] + q[1:-1, 2:])


def variational_refine(ref, cur, flow, alpha=0.05, outer=3, inner=20) -> np.ndarray:
    """Horn-Schunck style smoothing pass on top of an initial flow.

    Linearizes the brightness constancy term around the current estimate and
    runs Jacobi sweeps on the increment with a quadratic smoothness prior.
    """
    f = flow.copy()
    a2 = alpha * alpha
    for _ in range(outer):
        wc = warp_back(cur, f)
        gy, gx = np.gradient(wc)
        it = wc - ref
        base = f.copy()
        for _ in range(inner):
            bu, bv = _box4(f[..., 0]), _box4(f[..., 1])
            r = gx * (bu - base[..., 0]) + gy * (bv - base[..., 1]) + it
            s = r / (a2 + gx * gx + gy * gy)
            f = np.stack([bu - gx * s, bv - gy * s], -1)
    return f


def dis_flow(reference, current, params: DisParams | None = None) -> FlowField:
    """Dense flow from ``reference`` to ``current`` by Dense Inverse Search.

    Coarse-to-fine over a block-averaged pyramid; at each level patches on a
    regular grid refine a translation by inverse-compositional Gauss-Newton,
    starting from the upsampled coarser flow, and the patch estimates are
    blended into a dense field.
    """
    params = params or DisParams()
    ref, cur = _pixels(reference), _pixels(current)
    if ref.shape != cur.shape:
        raise DimensionMismatch(f"reference {ref.shape} vs current {cur.shape}")
    L = int(params.levels)
    if L < 1 or params.patch_size < 2 or params.patch_stride < 1:
        raise DataError("levels >= 1, patch_size >= 2 and patch_stride >= 1 are required")
    f = 2 ** (L - 1)
    if ref.shape[0] % f or ref.shape[1] % f:
        raise DimensionMismatch(f"image size {ref.shape} not divisible by 2^(levels-1) = {f}")

    gy, gx = np.gradient(ref)
    flat = float(np.mean(np.hypot(gx, gy))) < TEXTURE_THRESHOLD
    if flat:
        warnings.warn("reference image has too little texture for reliable flow", InsufficientTexture)

    pr, pc = build_pyramid(ref, L), build_pyramid(cur, L)
    flow = np.zeros(pr[-1].shape + (2,))
    for lvl in range(L - 1, -1, -1):
        if lvl < L - 1:
            flow = 2.0 * np.repeat(np.repeat(flow, 2, axis=0), 2, axis=1)
        flow = _level_flow(pr[lvl], pc[lvl], flow, params.patch_size,
                           params.patch_stride, params.grad_descent_iters)
    if params.variational_refine:
        flow = variational_refine(ref, cur, flow, params.variational_alpha,
                                  params.variational_outer, params.variational_inner)
    return FlowField(flow, flat)


def divergence(flow) -> np.ndarray:
    """Central-difference divergence ``du/dx + dv/dy``; zero on the border."""
    v = _vectors(flow)
    div = np.zeros(v.shape[:2])
    div[1:-1, 1:-1] = (0.5 * (v[1:-1, 2:, 0] - v[1:-1, :-2, 0])
                       + 0.5 * (v[2:, 1:-1, 1] - v[:-2, 1:-1, 1]))
    return div


def flow_to_force(flow, cal: ForceCalibration | None = None) -> np.ndarray:
    """Linear decoupling of a displacement field into an H x W x 3 force field.

    Shear comes from the in-plane displacement through ``tangential_gain``;
    the normal component is proportional to the local divergence, since
    normal load spreads the gel outward.
    """
    cal = cal or ForceCalibration()
    v = _vectors(flow)
    out = np.empty(v.shape[:2] + (3,))
    out[..., :2] = v @ cal.tangential_gain.T
    out[..., 2] = cal.normal_gain * divergence(v)
    return out


def _force(field) -> np.ndarray:
    f = np.asarray(field, dtype=float)
    if f.ndim != 3 or f.shape[2] != 3 or not np.all(np.isfinite(f)):
        raise DataError(f"force field must be a finite H x W x 3 array, got shape {f.shape}")
    return f


def mean_contact_force(left, right) -> np.ndarray:
    """Component-wise mean force over every pixel of both finger pads."""
    lf, rf = _force(left).reshape(-1, 3), _force(right).reshape(-1, 3)
    return (lf.sum(axis=0) + rf.sum(axis=0)) / (len(lf) + len(rf))


def contact_force_magnitude(left, right) -> float:
    return float(np.linalg.norm(mean_contact_force(left, right)))
