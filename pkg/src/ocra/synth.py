"""Deterministic synthetic ground truth for every pipeline stage.

Scenes are spheres and boxes rendered analytically into two depth cameras;
tactile frames are a procedurally generated random-dot gel pattern warped by
an affine displacement field with a closed-form inverse.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.stats import qmc

from . import io
from .errors import DataError, FlowTooLarge, FrameOutOfRange
from .geometry import (CameraModel, DepthMap, Mask, Se3Transform, compose_all,
                       so3_exp, so3_log)

MANIFEST_VERSION = 1


# --------------------------------------------------------------------------
# scene description
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Primitive:
    """A sphere (``size`` = diameter) or box (``size`` = edge lengths).

    ``pose`` maps object coordinates (origin at the centre) to world.
    """
    kind: str
    size: object
    pose: Se3Transform = field(default_factory=Se3Transform.identity)
    manipulated: bool = False

    def __post_init__(self):
        if self.kind == "sphere":
            s = float(np.asarray(self.size, dtype=float).reshape(-1)[0])
            if not s > 0:
                raise DataError("sphere diameter must be positive")
            object.__setattr__(self, "size", s)
        elif self.kind == "box":
            s = np.asarray(self.size, dtype=float).reshape(-1)
            s = np.repeat(s, 3) if s.size == 1 else s
            if s.shape != (3,) or not np.all(s > 0):
                raise DataError("box size must be three positive edge lengths")
            object.__setattr__(self, "size", tuple(float(v) for v in s))
        else:
            raise DataError(f"unknown primitive kind {self.kind!r}")
        if not self.pose.is_valid(1e-9):
            raise DataError("primitive pose is not a rigid transform")

    def with_pose(self, pose: Se3Transform) -> Primitive:
        return replace(self, pose=pose)

    def intersect(self, origins, dirs) -> np.ndarray:
        """Nearest positive ray parameter for object-frame rays (inf on miss)."""
        if self.kind == "sphere":
            r = 0.5 * self.size
            a = np.einsum("ij,ij->i", dirs, dirs)
            b = np.einsum("ij,ij->i", origins, dirs)
            c = np.einsum("ij,ij->i", origins, origins) - r * r
            disc = b * b - a * c
            hit = disc >= 0
            sq = np.sqrt(np.where(hit, disc, 0.0))
            t0 = (-b - sq) / a
            t1 = (-b + sq) / a
            t = np.where(t0 > 0, t0, t1)
            return np.where(hit & (t > 0), t, np.inf)
        half = 0.5 * np.asarray(self.size)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            ta = (-half - origins) * inv
            tb = (half - origins) * inv
        lo = np.where(np.isnan(ta), -np.inf, np.minimum(ta, tb))
        hi = np.where(np.isnan(tb), np.inf, np.maximum(ta, tb))
        t_near = lo.max(axis=1)
        t_far = hi.min(axis=1)
        t = np.where(t_near > 0, t_near, t_far)
        return np.where((t_near <= t_far) & (t > 0), t, np.inf)

    def signed_distance(self, points_world) -> np.ndarray:
        p = self.pose.inverse().apply(np.atleast_2d(points_world))
        if self.kind == "sphere":
            return np.linalg.norm(p, axis=1) - 0.5 * self.size
        q = np.abs(p) - 0.5 * np.asarray(self.size)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        return outside + np.minimum(q.max(axis=1), 0.0)

    def to_dict(self) -> dict:
        size = self.size if self.kind == "sphere" else list(self.size)
        return {"kind": self.kind, "size": size, "pose": self.pose.to_dict(),
                "manipulated": bool(self.manipulated)}

    @classmethod
    def from_dict(cls, d) -> Primitive:
        return cls(d["kind"], d["size"], Se3Transform.from_dict(d["pose"]), bool(d.get("manipulated", False)))


@dataclass(frozen=True, eq=False)
class SceneSpec:
    """Primitives at frame 0, the manipulated object's per-step motion and two cameras.

    Frame ``f`` places every manipulated primitive at
    ``cumulative(trajectory[:f]) @ pose``; context objects stay put.
    ``grip_force`` (N) and ``weight`` (N) drive the tactile model.
    """
    primitives: tuple
    trajectory: tuple
    cameras: tuple
    depth_noise: float = 0.0
    dropout: float = 0.0
    seed: int = 0
    grip_force: float = 1.0
    weight: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))
        object.__setattr__(self, "trajectory", tuple(self.trajectory))
        object.__setattr__(self, "cameras", tuple(self.cameras))
        if not self.primitives:
            raise DataError("scene needs at least one primitive")
        if len(self.cameras) != 2:
            raise DataError("scene needs exactly two cameras")
        for i, T in enumerate(self.trajectory):
            if not T.is_valid(1e-9):
                raise DataError(f"trajectory step {i} is not a rigid transform")
        if self.depth_noise < 0 or not 0 <= self.dropout < 1:
            raise DataError("depth_noise must be >= 0 and dropout in [0, 1)")

    @property
    def n_frames(self) -> int:
        return len(self.trajectory) + 1

    @property
    def manipulated_index(self) -> int:
        for i, p in enumerate(self.primitives):
            if p.manipulated:
                return i
        raise DataError("scene has no manipulated primitive")

    def check_frame(self, frame: int):
        if not 0 <= frame < self.n_frames:
            raise FrameOutOfRange(f"frame {frame} outside [0, {self.n_frames - 1}]")

    def pose_at(self, index: int, frame: int) -> Se3Transform:
        self.check_frame(frame)
        p = self.primitives[index]
        if not p.manipulated or frame == 0:
            return p.pose
        return compose_all(self.trajectory[:frame][::-1]) @ p.pose

    def primitives_at(self, frame: int) -> list:
        return [p.with_pose(self.pose_at(i, frame)) for i, p in enumerate(self.primitives)]

    def to_dict(self) -> dict:
        return {
            "primitives": [p.to_dict() for p in self.primitives],
            "trajectory": [T.to_dict() for T in self.trajectory],
            "cameras": [c.to_dict() for c in self.cameras],
            "depth_noise": self.depth_noise, "dropout": self.dropout, "seed": self.seed,
            "grip_force": self.grip_force, "weight": self.weight,
        }

    @classmethod
    def from_dict(cls, d) -> SceneSpec:
        return cls([Primitive.from_dict(p) for p in d["primitives"]],
                   [Se3Transform.from_dict(t) for t in d["trajectory"]],
                   [CameraModel.from_dict(c) for c in d["cameras"]],
                   float(d.get("depth_noise", 0.0)), float(d.get("dropout", 0.0)),
                   int(d.get("seed", 0)), float(d.get("grip_force", 1.0)),
                   float(d.get("weight", 1.0)))


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Se3Transform:
    """Camera-to-world pose for a camera at ``eye`` looking at ``target``
    (x right, y down, z forward)."""
    eye = np.asarray(eye, dtype=float)
    z = np.asarray(target, dtype=float) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=float))
    if np.linalg.norm(x) < 1e-9:
        raise DataError("viewing direction is parallel to the up vector")
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Se3Transform(np.stack([x, y, z], axis=1), eye)


def make_camera(eye, target, width=320, height=240, fov_deg=50.0) -> CameraModel:
    f = 0.5 * width / np.tan(0.5 * np.deg2rad(fov_deg))
    return CameraModel(f, f, width / 2.0 - 0.5, height / 2.0 - 0.5, width, height, look_at(eye, target))


def constant_velocity_trajectory(start: Se3Transform, goal: Se3Transform, n_steps: int) -> list:
    """Per-step world transforms moving ``start`` to ``goal`` with the centre on
    a straight line and the orientation on a geodesic, both at uniform speed."""
    if n_steps < 1:
        raise DataError("n_steps must be >= 1")
    w = so3_log(goal.rotation @ start.rotation.T)
    poses = []
    for f in range(n_steps + 1):
        s = f / n_steps
        poses.append(Se3Transform(so3_exp(s * w) @ start.rotation,
                                  (1.0 - s) * start.translation + s * goal.translation))
    poses[-1] = goal
    return [poses[f] @ poses[f - 1].inverse() for f in range(1, n_steps + 1)]


# --------------------------------------------------------------------------
# depth rendering
# --------------------------------------------------------------------------

def render_depth(spec: SceneSpec, frame: int, view: int):
    """Ray-cast depth (0 = no hit / dropout) and one visibility mask per primitive."""
    spec.check_frame(frame)
    if view not in (0, 1):
        raise DataError(f"view must be 0 or 1, got {view}")
    cam = spec.cameras[view]
    rays = cam.rays().reshape(-1, 3)
    best = np.full(len(rays), np.inf)
    owner = np.full(len(rays), -1)
    for i, prim in enumerate(spec.primitives_at(frame)):
        A = prim.pose.inverse() @ cam.pose          # camera -> object
        t = prim.intersect(np.broadcast_to(A.translation, rays.shape), rays @ A.rotation.T)
        closer = t < best
        best[closer] = t[closer]
        owner[closer] = i
    depth = np.where(np.isfinite(best), best, 0.0)
    if spec.depth_noise > 0 or spec.dropout > 0:
        rng = np.random.default_rng([spec.seed, frame, view])
        hit = depth > 0
        if spec.depth_noise > 0:
            depth = np.where(hit, depth + rng.normal(0.0, spec.depth_noise, depth.shape), 0.0)
            depth = np.maximum(depth, 0.0)
        if spec.dropout > 0:
            depth = np.where(rng.random(depth.shape) < spec.dropout, 0.0, depth)
    shape = (cam.height, cam.width)
    masks = [Mask((owner == i).reshape(shape)) for i in range(len(spec.primitives))]
    return DepthMap(depth.reshape(shape)), masks


# --------------------------------------------------------------------------
# tactile images
# --------------------------------------------------------------------------

_M1 = np.uint64(0x9E3779B97F4A7C15)
_M2 = np.uint64(0xBF58476D1CE4E5B9)
_M3 = np.uint64(0x94D049BB133111EB)


def _hash_uniform(*keys) -> np.ndarray:
    """Stateless uniform [0, 1) numbers from integer keys (splitmix64 chain)."""
    z = np.zeros(np.broadcast(*keys).shape, dtype=np.uint64)
    with np.errstate(over="ignore"):
        for k in keys:
            z = z ^ np.asarray(k).astype(np.int64).astype(np.uint64)
            z = z + _M1
            z = (z ^ (z >> np.uint64(30))) * _M2
            z = (z ^ (z >> np.uint64(27))) * _M3
            z = z ^ (z >> np.uint64(31))
    return (z >> np.uint64(11)).astype(float) / float(1 << 53)


def dot_pattern(seed: int, x, y, cell: float = 5.0, radius: float = 1.3) -> np.ndarray:
    """Random-dot gel texture evaluated at arbitrary (x, y) pixel coordinates.

    One Gaussian dot per ``cell x cell`` square, jittered inside its cell,
    with random amplitude; the result lies in [0.1, 0.9].
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    ci, cj = np.floor(x / cell), np.floor(y / cell)
    reach = int(np.ceil(4.0 * radius / cell))
    acc = np.zeros(np.broadcast(x, y).shape)
    for di in range(-reach, reach + 1):
        for dj in range(-reach, reach + 1):
            i, j = ci + di, cj + dj
            cx = (i + _hash_uniform(seed, i, j, 1)) * cell
            cy = (j + _hash_uniform(seed, i, j, 2)) * cell
            amp = 0.5 + 0.5 * _hash_uniform(seed, i, j, 3)
            acc += amp * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2.0 * radius * radius))
    return 0.1 + 0.8 * (1.0 - np.exp(-acc))


def affine_flow_params(flow_spec: dict, height: int, width: int):
    """``(A, c, d)`` of the flow ``f(p) = A (p - c) + d`` named by ``flow_spec``.

    Kinds: ``uniform`` (``shift``), ``radial`` (``rate``, optional ``center``),
    ``shear`` (``rate``: horizontal displacement per row) and ``affine``
    (``matrix``, ``shift``, ``center``).
    """
    kind = flow_spec.get("kind", "uniform")
    c = np.asarray(flow_spec.get("center", ((width - 1) / 2.0, (height - 1) / 2.0)), dtype=float)
    d = np.asarray(flow_spec.get("shift", (0.0, 0.0)), dtype=float)
    if kind == "uniform":
        A = np.zeros((2, 2))
    elif kind == "radial":
        A = float(flow_spec["rate"]) * np.eye(2)
    elif kind == "shear":
        A = np.array([[0.0, float(flow_spec["rate"])], [0.0, 0.0]])
    elif kind == "affine":
        A = np.asarray(flow_spec["matrix"], dtype=float).reshape(2, 2)
    else:
        raise DataError(f"unknown flow kind {kind!r}")
    if abs(np.linalg.det(np.eye(2) + A)) < 1e-9:
        raise DataError("flow field folds the image (I + A is singular)")
    return A, c, d


def gen_tactile_pair(seed: int, flow_spec: dict, height: int = 240, width: int = 320,
                     margin: float | None = None):
    """Reference gel image, the image after displacement, and the exact flow.

    The current frame is rendered analytically: ``current(p + f(p)) = reference(p)``.
    Raises :class:`FlowTooLarge` when some displacement reaches ``margin``
    (default one eighth of the shorter image side).
    """
    A, c, d = affine_flow_params(flow_spec, height, width)
    yy, xx = np.mgrid[0:height, 0:width].astype(float)
    p = np.stack([xx, yy], axis=-1)
    flow = (p - c) @ A.T + d
    margin = min(height, width) / 8.0 if margin is None else margin
    peak = float(np.max(np.linalg.norm(flow, axis=-1)))
    if peak >= margin:
        raise FlowTooLarge(f"peak displacement {peak:.2f} px >= margin {margin:.2f} px")
    ref = dot_pattern(seed, xx, yy)
    src = (p - c - d) @ np.linalg.inv(np.eye(2) + A).T + c
    cur = dot_pattern(seed, src[..., 0], src[..., 1])
    from .tactile import GrayImage
    return GrayImage(ref), GrayImage(cur), flow


def current_value(seed: int, flow_spec: dict, height: int, width: int, x, y) -> np.ndarray:
    """Analytic current-frame intensity at arbitrary coordinates."""
    A, c, d = affine_flow_params(flow_spec, height, width)
    q = np.stack([np.asarray(x, dtype=float), np.asarray(y, dtype=float)], axis=-1)
    src = (q - c - d) @ np.linalg.inv(np.eye(2) + A).T + c
    return dot_pattern(seed, src[..., 0], src[..., 1])


@dataclass(frozen=True)
class TactileModel:
    """Pad imaging model: grip force spreads the gel radially (Poisson effect),
    the object's weight shears it downward; ``flow_to_force`` with the
    matching calibration inverts it."""
    height: int = 48
    width: int = 64
    normal_rate: float = 0.01      # radial strain per newton of grip
    shear_rate: float = 1.0        # pixels of downward shift per newton of weight

    def flow_spec(self, grip: float, weight: float) -> dict:
        held = 1.0 if grip > 0 else 0.0
        return {"kind": "affine", "matrix": (self.normal_rate * grip * np.eye(2)).tolist(),
                "shift": [0.0, self.shear_rate * weight * held]}

    def calibration(self):
        from .tactile import ForceCalibration
        return ForceCalibration(np.eye(2) / self.shear_rate, 1.0 / (2.0 * self.normal_rate))

    def to_dict(self) -> dict:
        return {"height": self.height, "width": self.width,
                "normal_rate": self.normal_rate, "shear_rate": self.shear_rate}

    @classmethod
    def from_dict(cls, d) -> TactileModel:
        return cls(int(d["height"]), int(d["width"]), float(d["normal_rate"]), float(d["shear_rate"]))


def render_pads(model: TactileModel, pad_seeds, grip: float, weight: float):
    """(reference, current) gray images for the left and right pads."""
    out = []
    for s in pad_seeds:
        ref, cur, _ = gen_tactile_pair(int(s), model.flow_spec(grip, weight), model.height, model.width)
        out.append((ref, cur))
    return out


# --------------------------------------------------------------------------
# bundled scenes and demonstration datasets
# --------------------------------------------------------------------------

BLOCK_SIZE = (0.06, 0.04, 0.04)
BLOCK_START = (0.0, -0.14, 0.08)


def _task_cameras(w: int, h: int) -> tuple:
    return (make_camera((0.36, -0.34, 0.36), (0.0, -0.06, 0.04), w, h),
            make_camera((-0.36, -0.34, 0.36), (0.0, -0.06, 0.04), w, h))


def _block_task(context, goal: Se3Transform, n_steps: int, seed: int, weight: float,
                resolution) -> SceneSpec:
    start = Se3Transform.from_translation(BLOCK_START)
    block = Primitive("box", BLOCK_SIZE, start, manipulated=True)
    traj = constant_velocity_trajectory(start, goal, n_steps)
    return SceneSpec((*context, block), traj, _task_cameras(*resolution), seed=seed, weight=weight)


def stack_spec(n_steps: int = 16, seed: int = 0, weight: float = 1.0,
               goal_xy=(0.0, 0.0), yaw_deg: float = 20.0,
               resolution=(320, 240)) -> SceneSpec:
    """Pick-and-place analogue: a 6 x 4 x 4 cm block, already lifted clear of
    the table, travels at constant velocity onto a 10 cm base block, turning
    by ``yaw_deg`` on the way.

    The block is elongated so that its yaw is observable, and the start
    height keeps the straight-line path from passing through the base.
    """
    base = Primitive("box", (0.10, 0.10, 0.04), Se3Transform.from_translation((0.0, 0.0, 0.02)))
    goal = Se3Transform.from_rotvec((0.0, 0.0, np.deg2rad(yaw_deg)),
                                    (goal_xy[0], goal_xy[1], 0.06))
    return _block_task((base,), goal, n_steps, seed, weight, resolution)


BUNDLED_SPECS = {"stack": stack_spec}


def sort_specs(n_steps: int = 16, seed: int = 0, light: float = 0.5, heavy: float = 1.5,
               resolution=(320, 240), bin_offset: float = 0.08) -> list:
    """Two objects with identical geometry and different weights, and two
    1 cm target plates at ``x = +-bin_offset``: the heavy object goes to the
    ``+x`` plate, the light one to the ``-x`` plate. Only touch tells them
    apart. Returns ``[heavy_spec, light_spec]``."""
    plates = tuple(Primitive("box", (0.08, 0.08, 0.01), Se3Transform.from_translation((x, 0.0, 0.005)))
                   for x in (bin_offset, -bin_offset))
    z = 0.01 + BLOCK_SIZE[2] / 2.0
    return [_block_task(plates, Se3Transform.from_translation((x, 0.0, z)), n_steps, seed, weight, resolution)
            for x, weight in ((bin_offset, heavy), (-bin_offset, light))]


def demo_variant(spec: SceneSpec, rng: np.random.Generator, start_jitter: float,
                 unit_offset=None) -> SceneSpec:
    """Perturb the manipulated object's start in the table plane and replan a
    constant-velocity path to the original final pose.

    The (x, y) offset is ``(2 u - 1) * start_jitter`` with ``u`` drawn
    uniformly from the unit square, or given as ``unit_offset``.
    """
    if start_jitter <= 0:
        return spec
    u = rng.uniform(0.0, 1.0, 2) if unit_offset is None else np.asarray(unit_offset, dtype=float)
    m = spec.manipulated_index
    start = spec.primitives[m].pose
    goal = spec.pose_at(m, spec.n_frames - 1)
    offset = np.array([*((2.0 * u - 1.0) * start_jitter), 0.0])
    new_start = Se3Transform(start.rotation, start.translation + offset)
    prims = list(spec.primitives)
    prims[m] = prims[m].with_pose(new_start)
    traj = constant_velocity_trajectory(new_start, goal, len(spec.trajectory))
    return replace(spec, primitives=tuple(prims), trajectory=tuple(traj))


def predicted_cameras(cams, recon_scale: float) -> list:
    """Cameras as an up-to-scale reconstruction would report them: every
    translation divided by ``recon_scale``."""
    return [replace(c, pose=Se3Transform(c.pose.rotation, c.pose.translation / recon_scale)) for c in cams]


def gen_demo_dataset(specs, n_demos: int, out_dir, seed: int = 0, start_jitter: float = 0.03,
                     recon_scale: float = 1.0, tactile: TactileModel | None = None) -> dict:
    """Render ``n_demos`` demonstrations and write them with a manifest.

    ``specs`` is one :class:`SceneSpec` or a list cycled over demos (for
    multi-class tasks). Depth is stored in reconstruction units (metric
    depth divided by ``recon_scale``) together with the correspondingly
    scaled predicted cameras and the metric measured cameras. Returns the
    manifest dict, also written to ``out_dir/manifest.json``.
    """
    if n_demos < 1:
        raise DataError("n_demos must be >= 1")
    specs = [specs] if isinstance(specs, SceneSpec) else list(specs)
    tactile = tactile or TactileModel()
    out = Path(out_dir)
    rng = np.random.default_rng(seed)
    # Demonstrators spread their start positions over the workspace: each
    # class draws its starts from a scrambled Halton sequence, which covers
    # the square far more evenly than independent uniform draws.
    per_class = [-(-(n_demos - c) // len(specs)) for c in range(len(specs))]
    starts = [qmc.Halton(d=2, scramble=True, seed=rng).random(max(k, 1)) for k in per_class]
    demos = []
    for n in range(n_demos):
        cls = n % len(specs)
        base = specs[cls]
        spec = demo_variant(base, rng, start_jitter, starts[cls][n // len(specs)])
        spec = replace(spec, seed=int(rng.integers(2 ** 31)))
        pad_seeds = [int(s) for s in rng.integers(2 ** 31, size=2)]
        name = f"demo_{n:03d}"
        frames = []
        for f in range(spec.n_frames):
            entry = {"depth": [], "masks": []}
            for v in (0, 1):
                depth, masks = render_depth(spec, f, v)
                dpath = f"{name}/f{f:03d}_v{v}_depth.bin"
                io.save_depth(out / dpath, DepthMap(depth.values / recon_scale))
                entry["depth"].append(dpath)
                mpaths = []
                for i, mk in enumerate(masks):
                    mpath = f"{name}/f{f:03d}_v{v}_mask{i}.bin"
                    io.save_mask(out / mpath, mk)
                    mpaths.append(mpath)
                entry["masks"].append(mpaths)
            frames.append(entry)
        pads = render_pads(tactile, pad_seeds, spec.grip_force, spec.weight)
        tac = {}
        for side, (ref, cur) in zip(("left", "right"), pads):
            for kind, img in (("reference", ref), ("current", cur)):
                path = f"{name}/tactile_{side}_{kind}.pgm"
                io.save_pgm(out / path, img.pixels)
                tac[f"{side}_{kind}"] = path
        m = spec.manipulated_index
        demos.append({
            "id": name,
            "class": cls,
            "seed": spec.seed,
            "pad_seeds": pad_seeds,
            "primitives": [p.to_dict() for p in spec.primitives],
            "frames": frames,
            "tactile": tac,
            "grip_force": spec.grip_force,
            "weight": spec.weight,
            "force_profile": [spec.grip_force] * spec.n_frames,
            "transforms": [T.to_dict() for T in spec.trajectory],
            "poses": [spec.pose_at(m, f).to_dict() for f in range(spec.n_frames)],
        })
    ref_spec = specs[0]
    manifest = {
        "version": MANIFEST_VERSION,
        "kind": "ocra-demo-dataset",
        "seed": seed,
        "n_demos": n_demos,
        "start_jitter": start_jitter,
        "recon_scale": recon_scale,
        "depth_noise": ref_spec.depth_noise,
        "dropout": ref_spec.dropout,
        "cameras": [c.to_dict() for c in ref_spec.cameras],
        "predicted_cameras": [c.to_dict() for c in predicted_cameras(ref_spec.cameras, recon_scale)],
        "tactile_model": tactile.to_dict(),
        "classes": [s.to_dict() for s in specs],
        "demos": demos,
    }
    io.write_json(out / "manifest.json", manifest)
    return manifest
