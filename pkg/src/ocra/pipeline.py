"""Pipeline stages: synth -> reconstruct -> track -> train -> rollout -> eval -> plot.

Every stage reads its inputs from, and writes its artifacts to, a directory
under the data root. Artifacts are written atomically, and a stage whose
inputs (config section plus input file contents) are unchanged since its
last successful run is skipped.
"""
from __future__ import annotations

import csv
import hashlib
import io as _io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import encode, io, synth
from .config import PipelineConfig
from .control import GripperPlant, PidState, execute_rollout
from .errors import ConfigError, DataError, FormatError, LengthMismatch
from .geometry import (CONTEXT, MANIPULATED, CameraModel, DepthMap, PointCloud, Se3Transform,
                       backproject, pose_encode, rotation_angle)
from .policy import DiffusionPolicy, PolicyConfig, sample_chunk, train
from .reconstruct import apply_scale, calibrate_scale, fuse_views, relative_pose
from .registration import IcpParams, track_sequence
from .tactile import DisParams, dis_flow, flow_to_force, mean_contact_force

STAGES = ("synth", "reconstruct", "track", "train", "rollout", "eval", "plot")

# fixed offsets that give each stage its own random stream from the run seed
_STAGE_SEED = {"synth": 11, "train": 13, "rollout": 17, "modes": 19}


# --------------------------------------------------------------------------
# stage bookkeeping
# --------------------------------------------------------------------------

def stage_dir(root, stage: str) -> Path:
    return Path(root) / stage


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _inputs_hash(root, stage: str, section, input_files) -> str:
    """Digest of a stage's config section and input files. Files are keyed by
    their path relative to the data root, so a moved root stays up to date."""
    h = hashlib.sha256()
    h.update(stage.encode())
    h.update(json.dumps(section, sort_keys=True, default=str).encode())
    root = Path(root)
    for rel, p in sorted((Path(p).relative_to(root).as_posix(), p) for p in input_files):
        h.update(rel.encode())
        h.update(_file_digest(p).encode())
    return h.hexdigest()


def _stamp_path(root, stage):
    return stage_dir(root, stage) / "stage.json"


def is_up_to_date(root, stage: str, digest: str) -> bool:
    stamp = _stamp_path(root, stage)
    if not stamp.exists():
        return False
    try:
        info = json.loads(stamp.read_text())
    except json.JSONDecodeError:
        return False
    outs = info.get("outputs", [])
    return info.get("inputs") == digest and all((stage_dir(root, stage) / o).exists() for o in outs)


def write_stamp(root, stage: str, digest: str, outputs):
    io.write_json(_stamp_path(root, stage), {"stage": stage, "inputs": digest, "outputs": sorted(outputs)})


def _dataset_files(root) -> list:
    d = stage_dir(root, "synth")
    if not (d / "manifest.json").exists():
        raise FormatError(f"missing dataset manifest {d / 'manifest.json'}; run `synth` first")
    return sorted(p for p in d.rglob("*") if p.is_file() and p.name != "stage.json")


def _stage_files(root, stage, pattern="*") -> list:
    d = stage_dir(root, stage)
    return sorted(p for p in d.rglob(pattern) if p.is_file() and p.name != "stage.json")


def _rows_to_csv(header, rows) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# --------------------------------------------------------------------------
# shared perception helpers
# --------------------------------------------------------------------------

def scene_specs(cfg: PipelineConfig) -> list:
    s = cfg.synth
    res = (s.width, s.height)
    if s.scene == "stack":
        specs = [synth.stack_spec(s.n_steps, cfg.seed, resolution=res)]
    elif s.scene == "sort":
        specs = synth.sort_specs(s.n_steps, cfg.seed, s.light, s.heavy, resolution=res)
    else:
        raise ConfigError(f"unknown scene {s.scene!r} (expected 'stack' or 'sort')")
    return [replace(sp, depth_noise=s.depth_noise, dropout=s.dropout) for sp in specs]


def tactile_model(cfg: PipelineConfig) -> synth.TactileModel:
    s = cfg.synth
    return synth.TactileModel(s.tactile_height, s.tactile_width, s.normal_rate, s.shear_rate)


def fuse_frame(depths, masks, cameras, labels, voxel: float) -> PointCloud:
    """Back-project every labelled mask of both views and fuse in world frame."""
    clouds = []
    for depth, view_masks, cam in zip(depths, masks, cameras):
        per_view = [backproject(depth, mk, cam, lab) for mk, lab in zip(view_masks, labels)]
        clouds.append(PointCloud.concat(per_view))
    return fuse_views(clouds[0], clouds[1], voxel)


def cloud_features(cloud: PointCloud, dim: int) -> np.ndarray:
    return encode.geom_features(cloud.select(MANIPULATED), cloud.select(CONTEXT), dim)


def tactile_reading(pairs, dis_params: DisParams, model: synth.TactileModel, dim: int):
    """(feature, mean contact force 3-vector) from [(ref, cur), (ref, cur)] pad images."""
    cal = model.calibration()
    fields_ = [flow_to_force(dis_flow(ref, cur, dis_params), cal) for ref, cur in pairs]
    return encode.tactile_features(fields_[0], fields_[1], dim), mean_contact_force(fields_[0], fields_[1])


def force_channels(force3, force_dims: int) -> np.ndarray:
    if force_dims == 0:
        return np.zeros(0)
    if force_dims == 1:
        return np.array([np.linalg.norm(force3)])
    return np.asarray(force3, dtype=float)


def _labels(primitives) -> list:
    return [MANIPULATED if p["manipulated"] else CONTEXT for p in primitives]


# --------------------------------------------------------------------------
# synth
# --------------------------------------------------------------------------

def run_synth(cfg: PipelineConfig, root) -> dict:
    out = stage_dir(root, "synth")
    section = {"synth": asdict(cfg.synth), "seed": cfg.seed}
    digest = _inputs_hash(root, "synth", section, [])
    if is_up_to_date(root, "synth", digest):
        return {"skipped": True}
    s = cfg.synth
    manifest = synth.gen_demo_dataset(scene_specs(cfg), s.n_demos, out,
                                      seed=cfg.seed * 1000 + _STAGE_SEED["synth"],
                                      start_jitter=s.start_jitter, recon_scale=s.recon_scale,
                                      tactile=tactile_model(cfg))
    write_stamp(root, "synth", digest, ["manifest.json"])
    return {"skipped": False, "n_demos": manifest["n_demos"]}


def load_manifest(root) -> dict:
    m = io.read_json(stage_dir(root, "synth") / "manifest.json")
    if m.get("version") != synth.MANIFEST_VERSION or m.get("kind") != "ocra-demo-dataset":
        raise FormatError("unsupported dataset manifest version/kind")
    return m


# --------------------------------------------------------------------------
# reconstruct
# --------------------------------------------------------------------------

def sequence_scale(manifest: dict):
    """Metric scale from the predicted vs measured relative pose of the two cameras."""
    pred = [CameraModel.from_dict(c) for c in manifest["predicted_cameras"]]
    meas = [CameraModel.from_dict(c) for c in manifest["cameras"]]
    return calibrate_scale(relative_pose(pred[0].pose, pred[1].pose),
                           relative_pose(meas[0].pose, meas[1].pose))


def _reconstruct_demo(demo, data_dir, out_dir, cameras, cal, voxel):
    labels = _labels(demo["primitives"])
    paths = []
    for f, frame in enumerate(demo["frames"]):
        depths = [apply_scale(io.load_depth(data_dir / p), cal) for p in frame["depth"]]
        masks = [[io.load_mask(data_dir / p) for p in view] for view in frame["masks"]]
        cloud = fuse_frame(depths, masks, cameras, labels, voxel)
        rel = f"{demo['id']}/f{f:03d}.ply"
        io.save_ply(out_dir / rel, cloud)
        paths.append(rel)
    return paths


def run_reconstruct(cfg: PipelineConfig, root, jobs: int = 1) -> dict:
    data_dir = stage_dir(root, "synth")
    inputs = _dataset_files(root)
    digest = _inputs_hash(root, "reconstruct", asdict(cfg.reconstruct), inputs)
    if is_up_to_date(root, "reconstruct", digest):
        return {"skipped": True}
    manifest = load_manifest(root)
    cameras = [CameraModel.from_dict(c) for c in manifest["cameras"]]
    out = stage_dir(root, "reconstruct")
    rc = cfg.reconstruct
    if rc.scale_mode not in ("per_sequence", "global"):
        raise ConfigError(f"unknown scale_mode {rc.scale_mode!r}")
    # all demos share the two cameras here, so both modes calibrate from the
    # same pair; per-sequence mode still records one calibration per demo
    cal = sequence_scale(manifest)

    def work(demo):
        return _reconstruct_demo(demo, data_dir, out, cameras, cal, rc.voxel_size)

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as ex:
        frame_paths = list(ex.map(work, manifest["demos"]))
    index = {"scale_mode": rc.scale_mode, "voxel_size": rc.voxel_size,
             "demos": [{"id": d["id"], "scale": cal.scale,
                        "rotation_discrepancy": cal.rotation_discrepancy, "frames": fp}
                       for d, fp in zip(manifest["demos"], frame_paths)]}
    io.write_json(out / "index.json", index)
    write_stamp(root, "reconstruct", digest, ["index.json"])
    return {"skipped": False, "scale": cal.scale}


# --------------------------------------------------------------------------
# track
# --------------------------------------------------------------------------

def icp_params(cfg: PipelineConfig) -> IcpParams:
    return IcpParams(**asdict(cfg.icp))


def run_track(cfg: PipelineConfig, root, jobs: int = 1) -> dict:
    inputs = _stage_files(root, "reconstruct")
    if not inputs:
        raise FormatError("no reconstruction found; run `reconstruct` first")
    digest = _inputs_hash(root, "track", asdict(cfg.icp), inputs)
    if is_up_to_date(root, "track", digest):
        return {"skipped": True}
    rdir = stage_dir(root, "reconstruct")
    index = io.read_json(rdir / "index.json")
    params = icp_params(cfg)
    out = stage_dir(root, "track")

    def work(demo):
        clouds = [io.load_ply(rdir / p).select(MANIPULATED) for p in demo["frames"]]
        results = track_sequence(clouds, params, full_results=True)
        return [{"frame": t, "rotation": r.transform.rotation.tolist(),
                 "translation": r.transform.translation.tolist(),
                 "rms": r.rms_residual, "iterations": r.iterations, "converged": r.converged}
                for t, r in enumerate(results)]

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as ex:
        tracks = list(ex.map(work, index["demos"]))
    names = []
    for demo, tr in zip(index["demos"], tracks):
        name = f"{demo['id']}.json"
        io.write_json(out / name, tr)
        names.append(name)
    write_stamp(root, "track", digest, names)
    return {"skipped": False, "n_sequences": len(names)}


def load_track(path) -> list:
    return [Se3Transform(e["rotation"], e["translation"]) for e in io.read_json(path)]


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------

def _obs_window(values, t: int, horizon: int) -> np.ndarray:
    idx = [max(0, t - horizon + 1 + i) for i in range(horizon)]
    return np.stack([values[i] for i in idx])


def build_training_set(cfg: PipelineConfig, root, pconf: PolicyConfig) -> dict:
    """Observation windows and action chunks from reconstructed/tracked demos.

    Sample ``t`` conditions on frames ``t-obs_horizon+1 .. t`` (clamped at 0)
    and targets the tracked motions ``T_{t+1} .. T_{t+H}``. Only windows that
    fit inside the demonstration are used: padding the tail with "hold
    still" steps would mix a second, far-away value into every late chunk
    column and inflate its normalization scale several-fold.
    """
    manifest = load_manifest(root)
    rdir, tdir, ddir = (stage_dir(root, s) for s in ("reconstruct", "track", "synth"))
    index = io.read_json(rdir / "index.json")
    model = synth.TactileModel.from_dict(manifest["tactile_model"])
    dis_params = DisParams(**asdict(cfg.dis))
    D, H = pconf.feature_dim, pconf.horizon
    x0, f_pc, f_t = [], [], []
    for demo, rec in zip(manifest["demos"], index["demos"]):
        feats = [cloud_features(io.load_ply(rdir / p), D) for p in rec["frames"]]
        motions = [pose_encode(T) for T in load_track(tdir / f"{demo['id']}.json")]
        tac = demo["tactile"]
        pairs = [(io.load_pgm(ddir / tac[f"{s}_reference"]), io.load_pgm(ddir / tac[f"{s}_current"]))
                 for s in ("left", "right")]
        ft, force3 = tactile_reading(pairs, dis_params, model, D)
        fch = force_channels(force3, pconf.force_dims)
        n = len(motions)
        if n < H:
            raise DataError(f"{demo['id']}: {n} tracked steps, fewer than the horizon {H}")
        for t in range(n - H + 1):
            steps = [np.concatenate([motions[t + i], fch]) for i in range(H)]
            x0.append(np.concatenate(steps))
            f_pc.append(_obs_window(feats, t, pconf.obs_horizon))
            f_t.append(np.stack([ft] * pconf.obs_horizon))
    return {"x0": np.array(x0), "f_pc": np.array(f_pc),
            "f_t": np.array(f_t) if pconf.uses_tactile else None}


def policy_config(cfg: PipelineConfig) -> PolicyConfig:
    d = asdict(cfg.policy)
    d.pop("steps")
    return PolicyConfig(**d)


def run_train(cfg: PipelineConfig, root) -> dict:
    inputs = _stage_files(root, "track") + _stage_files(root, "reconstruct") + _dataset_files(root)
    section = {"policy": asdict(cfg.policy), "dis": asdict(cfg.dis), "seed": cfg.seed}
    digest = _inputs_hash(root, "train", section, inputs)
    if is_up_to_date(root, "train", digest):
        return {"skipped": True}
    pconf = policy_config(cfg)
    data = build_training_set(cfg, root, pconf)
    rng = np.random.default_rng([cfg.seed, _STAGE_SEED["train"]])
    policy = DiffusionPolicy(pconf, rng)
    policy.fit_normalizers(data["x0"], data["f_pc"], data["f_t"])
    losses = train(policy, data, cfg.policy.steps, rng)
    out = stage_dir(root, "train")
    policy.save(out / "policy.ocra", extra={"meta/seed": np.array([cfg.seed])})
    io.atomic_write_text(out / "losses.csv", _rows_to_csv(
        ["step", "loss"], [[i + 1, repr(float(l))] for i, l in enumerate(losses)]))
    write_stamp(root, "train", digest, ["policy.ocra", "losses.csv"])
    tail = float(np.mean(losses[-100:])) if losses else float("nan")
    return {"skipped": False, "samples": len(data["x0"]), "final_loss": tail}


# --------------------------------------------------------------------------
# rollout
# --------------------------------------------------------------------------

@dataclass
class _Observer:
    """Renders the scene at a given object pose and turns it into features."""
    spec: synth.SceneSpec
    cfg: PipelineConfig
    policy: DiffusionPolicy
    pad_seeds: list
    model: synth.TactileModel
    cache: dict = field(default_factory=dict)

    def features(self, step: int, pose: Se3Transform):
        if step in self.cache:
            return self.cache[step]
        m = self.spec.manipulated_index
        prims = list(self.spec.primitives)
        prims[m] = prims[m].with_pose(pose)
        scene = replace(self.spec, primitives=tuple(prims), trajectory=(),
                        seed=self.spec.seed + 7919 * step)
        labels = [MANIPULATED if p.manipulated else CONTEXT for p in prims]
        rendered = [synth.render_depth(scene, 0, v) for v in (0, 1)]
        # depth goes through the same float32 quantization as stored demos
        depths = [DepthMap(r[0].values.astype(np.float32).astype(float)) for r in rendered]
        cloud = fuse_frame(depths, [r[1] for r in rendered],
                           scene.cameras, labels, self.cfg.reconstruct.voxel_size)
        f_pc = cloud_features(cloud, self.policy.config.feature_dim)
        f_t = None
        if self.policy.config.uses_tactile:
            if "tactile" not in self.cache:
                pairs = [(r.pixels, c.pixels) for r, c in
                         synth.render_pads(self.model, self.pad_seeds, self.spec.grip_force, self.spec.weight)]
                self.cache["tactile"] = tactile_reading(pairs, DisParams(**asdict(self.cfg.dis)),
                                                        self.model, self.policy.config.feature_dim)[0]
            f_t = self.cache["tactile"]
        self.cache[step] = (f_pc, f_t)
        return f_pc, f_t


def simulate_rollout(policy: DiffusionPolicy, cfg: PipelineConfig, spec: synth.SceneSpec,
                     rng: np.random.Generator, pad_seeds, model: synth.TactileModel):
    """Closed-loop execution in the synthetic scene.

    The object starts where ``spec`` puts it; the policy observes the
    rendered scene, its chunk is executed for ``execute_steps`` steps
    (moving the object by the predicted transforms), and the loop repeats
    until the demonstration length is reached. Returns (log, ground-truth poses),
    both in the robot frame.
    """
    c = cfg.control
    E = Se3Transform.from_dict(c.extrinsic) if c.extrinsic else Se3Transform.identity()
    plant = GripperPlant(c.plant_gain, c.dt, c.plant_noise, seed=int(rng.integers(2 ** 31)))
    pid = PidState(c.kp, c.ki, c.kd, c.lo, c.hi)
    obs = _Observer(spec, cfg, policy, pad_seeds, model)
    m = spec.manipulated_index
    n = len(spec.trajectory)
    poses = [spec.primitives[m].pose]
    log = []
    H, h_obs = policy.config.horizon, policy.config.obs_horizon
    while len(poses) - 1 < n:
        t = len(poses) - 1
        window = [obs.features(s, poses[s]) for s in (max(0, t - h_obs + 1 + i) for i in range(h_obs))]
        f_pc = np.stack([w[0] for w in window])
        f_t = np.stack([w[1] for w in window]) if policy.config.uses_tactile else None
        _, transforms, forces = sample_chunk(policy, f_pc, f_t, rng)
        k = min(cfg.rollout.execute_steps, H, n - t)
        chunk_log = execute_rollout([(transforms[:k], forces[:k] if forces.size else None)], E, plant, pid,
                                    initial_pose=E @ poses[-1], substeps=c.substeps,
                                    force_scale=c.force_scale)
        for i, entry in enumerate(chunk_log):
            entry["step"] = t + i
            log.append(entry)
            poses.append(transforms[i] @ poses[-1])
    gt = [E @ spec.pose_at(m, f) for f in range(1, n + 1)]
    return log, gt


def run_rollout(cfg: PipelineConfig, root) -> dict:
    inputs = _stage_files(root, "train") + [stage_dir(root, "synth") / "manifest.json"]
    section = {"rollout": asdict(cfg.rollout), "control": asdict(cfg.control),
               "reconstruct": asdict(cfg.reconstruct), "dis": asdict(cfg.dis), "seed": cfg.seed}
    digest = _inputs_hash(root, "rollout", section, inputs)
    if is_up_to_date(root, "rollout", digest):
        return {"skipped": True}
    manifest = load_manifest(root)
    policy = DiffusionPolicy.load(stage_dir(root, "train") / "policy.ocra")
    specs = [synth.SceneSpec.from_dict(s) for s in manifest["classes"]]
    model = synth.TactileModel.from_dict(manifest["tactile_model"])
    jitter = manifest["start_jitter"] if cfg.rollout.start_jitter is None else cfg.rollout.start_jitter
    rng = np.random.default_rng([cfg.seed, _STAGE_SEED["rollout"]])
    lines, truth = [], []
    for r in range(cfg.rollout.n_rollouts):
        cls = r % len(specs)
        spec = synth.demo_variant(specs[cls], rng, jitter)
        spec = replace(spec, seed=int(rng.integers(2 ** 31)))
        pad_seeds = [int(s) for s in rng.integers(2 ** 31, size=2)]
        log, gt = simulate_rollout(policy, cfg, spec, rng, pad_seeds, model)
        for entry in log:
            entry["rollout"] = r
            lines.append(json.dumps(entry, sort_keys=True))
        truth.append({"rollout": r, "class": cls, "poses": [T.to_dict() for T in gt]})
    out = stage_dir(root, "rollout")
    io.atomic_write_text(out / "log.jsonl", "".join(l + "\n" for l in lines))
    io.write_json(out / "ground_truth.json", {"version": 1, "rollouts": truth})
    rows = [[json.loads(l)["rollout"], json.loads(l)["step"], repr(json.loads(l)["reference_force"]),
             repr(json.loads(l)["command"]), repr(json.loads(l)["measured_force"])] for l in lines]
    io.atomic_write_text(out / "force.csv", _rows_to_csv(
        ["rollout", "step", "reference_force", "command", "measured_force"], rows))
    write_stamp(root, "rollout", digest, ["log.jsonl", "ground_truth.json", "force.csv"])
    return {"skipped": False, "n_rollouts": cfg.rollout.n_rollouts}


# --------------------------------------------------------------------------
# eval
# --------------------------------------------------------------------------

def read_log(path) -> list:
    try:
        text = Path(path).read_text()
    except FileNotFoundError as e:
        raise FormatError(f"missing input file: {path}") from e
    out = []
    for i, line in enumerate(text.splitlines()):
        if line.strip():
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise FormatError(f"{path}:{i + 1}: malformed JSON line") from e
    return out


def pose_errors(pred: Se3Transform, gt: Se3Transform):
    """(translation error in m, rotation error in rad)."""
    return (float(np.linalg.norm(pred.translation - gt.translation)),
            rotation_angle(pred.rotation.T @ gt.rotation))


def evaluate_run(pred_poses, gt_poses, ref_force, meas_force, trans_thr: float,
                 rot_thr: float, process_factor: float = 10.0) -> dict:
    """Per-run metrics and outcome class.

    ``process_failure``: some intermediate step strays more than
    ``process_factor`` times a threshold from the reference path;
    ``success``: final pose within both thresholds; otherwise
    ``outcome_failure``.
    """
    if len(pred_poses) != len(gt_poses):
        raise LengthMismatch(f"{len(pred_poses)} predicted vs {len(gt_poses)} ground-truth poses")
    errs = [pose_errors(p, g) for p, g in zip(pred_poses, gt_poses)]
    te = [e[0] for e in errs]
    re = [e[1] for e in errs]
    ref = np.asarray(ref_force, dtype=float)
    meas = np.asarray(meas_force, dtype=float)
    force_rmse = float(np.sqrt(np.mean((ref - meas) ** 2))) if len(ref) else 0.0
    final_t, final_r = (te[-1], re[-1]) if errs else (0.0, 0.0)
    if any(t > process_factor * trans_thr or r > process_factor * rot_thr for t, r in zip(te, re)):
        outcome = "process_failure"
    elif final_t < trans_thr and final_r < rot_thr:
        outcome = "success"
    else:
        outcome = "outcome_failure"
    return {"step_translation_error": te, "step_rotation_error_deg": list(np.rad2deg(re)),
            "final_translation_error": final_t, "final_rotation_error_deg": float(np.rad2deg(final_r)),
            "force_rmse": force_rmse, "outcome": outcome}


def evaluate_logs(log: list, truth: dict, trans_thr: float, rot_thr_deg: float,
                  process_factor: float = 10.0) -> dict:
    runs = []
    by_run = {}
    for e in log:
        by_run.setdefault(e["rollout"], []).append(e)
    for gt in truth["rollouts"]:
        entries = sorted(by_run.get(gt["rollout"], []), key=lambda e: e["step"])
        pred = [Se3Transform.from_dict(e["pose"]) for e in entries]
        gts = [Se3Transform.from_dict(p) for p in gt["poses"]]
        m = evaluate_run(pred, gts, [e["reference_force"] for e in entries],
                         [e["measured_force"] for e in entries], trans_thr,
                         np.deg2rad(rot_thr_deg), process_factor)
        m["rollout"] = gt["rollout"]
        m["class"] = gt.get("class", 0)
        runs.append(m)
    counts = {k: sum(r["outcome"] == k for r in runs) for k in ("success", "outcome_failure", "process_failure")}
    return {"version": 1, "thresholds": {"translation": trans_thr, "rotation_deg": rot_thr_deg,
                                         "process_factor": process_factor},
            "n_runs": len(runs), "counts": counts,
            "success_rate": counts["success"] / len(runs) if runs else 0.0, "runs": runs}


def mode_accuracy(cfg: PipelineConfig, root, policy: DiffusionPolicy | None = None,
                  n_per_class: int | None = None) -> dict:
    """How often the policy's first chunk heads for the right class.

    For each task class, ``n_per_class`` fresh scenes are drawn (new start
    jitter, new tactile pad noise); one chunk is sampled from the initial
    observation and assigned to the class whose ideal first chunk (the
    demonstrated constant-velocity motion from that start) is nearest in
    translation. Returns overall and per-class accuracy.
    """
    manifest = load_manifest(root)
    policy = policy or DiffusionPolicy.load(stage_dir(root, "train") / "policy.ocra")
    specs = [synth.SceneSpec.from_dict(s) for s in manifest["classes"]]
    model = synth.TactileModel.from_dict(manifest["tactile_model"])
    n = cfg.eval.mode_samples if n_per_class is None else n_per_class
    rng = np.random.default_rng([cfg.seed, _STAGE_SEED["modes"]])
    H = policy.config.horizon
    correct = np.zeros((len(specs), n), dtype=bool)
    for c in range(len(specs)):
        for i in range(n):
            u = rng.uniform(0.0, 1.0, 2)
            variants = [synth.demo_variant(s, rng, manifest["start_jitter"], u) for s in specs]
            spec = replace(variants[c], seed=int(rng.integers(2 ** 31)))
            pads = [int(v) for v in rng.integers(2 ** 31, size=2)]
            obs = _Observer(spec, cfg, policy, pads, model)
            f_pc, f_t = obs.features(0, spec.primitives[spec.manipulated_index].pose)
            window_pc = np.stack([f_pc] * policy.config.obs_horizon)
            window_t = np.stack([f_t] * policy.config.obs_horizon) if policy.config.uses_tactile else None
            _, transforms, _ = sample_chunk(policy, window_pc, window_t, rng)
            got = np.array([T.translation for T in transforms])
            dist = [np.sum((got - np.array([T.translation for T in v.trajectory[:H]])) ** 2) for v in variants]
            correct[c, i] = int(np.argmin(dist)) == c
    return {"accuracy": float(correct.mean()), "per_class": correct.mean(axis=1).tolist(),
            "n_per_class": n}


def run_eval(cfg: PipelineConfig, root, log_path=None, truth_path=None) -> dict:
    rdir = stage_dir(root, "rollout")
    metrics = evaluate_logs(read_log(Path(log_path or rdir / "log.jsonl")),
                            io.read_json(Path(truth_path or rdir / "ground_truth.json")),
                            cfg.eval.translation_threshold, cfg.eval.rotation_threshold_deg,
                            cfg.eval.process_factor)
    info = {"success_rate": metrics["success_rate"], "counts": metrics["counts"]}
    if log_path is None and truth_path is None and len(load_manifest(root)["classes"]) > 1:
        metrics["modes"] = mode_accuracy(cfg, root)
        info["mode_accuracy"] = metrics["modes"]["accuracy"]
    io.write_json(stage_dir(root, "eval") / "metrics.json", metrics)
    return info


# --------------------------------------------------------------------------
# plot
# --------------------------------------------------------------------------

def run_plot(cfg: PipelineConfig, root, log_path=None, losses_path=None, truth_path=None,
             out_dir=None) -> dict:
    from . import plots
    out = Path(out_dir) if out_dir else stage_dir(root, "plot")
    log_path = Path(log_path) if log_path else stage_dir(root, "rollout") / "log.jsonl"
    losses_path = Path(losses_path) if losses_path else stage_dir(root, "train") / "losses.csv"
    truth_path = Path(truth_path) if truth_path else stage_dir(root, "rollout") / "ground_truth.json"
    written = []
    if losses_path.exists():
        written += plots.loss_figure(plots.read_losses(losses_path), out)
    log = read_log(log_path)
    truth = io.read_json(truth_path) if truth_path.exists() else {"rollouts": []}
    written += plots.trajectory_figure(log, truth, out)
    written += plots.force_figure(log, out)
    return {"files": sorted(str(Path(w).name) for w in written)}
