import contextlib
import io as stdio
import json
import shutil
import xml.etree.ElementTree as ET
import numpy as np
import pytest

from ocra import cli, io, pipeline, synth
from ocra.config import PipelineConfig, config_from_dict, load_config
from ocra.errors import ConfigError, LengthMismatch
from ocra.geometry import MANIPULATED, Se3Transform, rotation_angle
from ocra.registration import track_sequence

TINY = {"version": 1, "seed": 3,
        "synth": {"n_demos": 3, "n_steps": 8, "width": 128, "height": 96},
        "policy": {"horizon": 4, "feature_dim": 16, "hidden": 32, "steps": 200, "diffusion_steps": 20},
        "rollout": {"n_rollouts": 2, "execute_steps": 4}}


def write_config(path, data=TINY):
    path.write_text(json.dumps(data))
    return str(path)


def run_cli(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, [json.loads(line) for line in out.splitlines() if line.startswith("{")], err


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    """One full tiny run through the CLI; returns (config path, data root, stage reports)."""
    d = tmp_path_factory.mktemp("chain")
    cfg = write_config(d / "tiny.json")
    root = d / "data"
    buf = stdio.StringIO()
    with contextlib.redirect_stdout(buf):
        code = cli.main(["--config", cfg, "--data-dir", str(root), "run"])
    assert code == 0
    reports = [json.loads(line) for line in buf.getvalue().splitlines()]
    return cfg, root, reports


# -- config -------------------------------------------------------------------

def test_defaults_round_trip():
    cfg = PipelineConfig()
    assert config_from_dict(cfg.to_dict()) == cfg


def test_unknown_keys_are_named():
    with pytest.raises(ConfigError, match="policy.stepz"):
        config_from_dict({"policy": {"stepz": 1}})
    with pytest.raises(ConfigError, match="'extra'"):
        config_from_dict({"extra": {}})


def test_type_and_version_checks(tmp_path):
    with pytest.raises(ConfigError, match="policy.steps"):
        config_from_dict({"policy": {"steps": 1.5}})
    with pytest.raises(ConfigError):
        config_from_dict({"version": 2})
    with pytest.raises(ConfigError):
        config_from_dict({"seed": -1})
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    assert config_from_dict({"policy": {"lr": 1}}).policy.lr == 1.0


def test_bundled_configs_load():
    from pathlib import Path
    root = Path(__file__).resolve().parents[1] / "configs"
    stack, sort = load_config(root / "stack.json"), load_config(root / "sort.json")
    assert stack.synth.scene == "stack" and stack.policy.fusion == "none"
    assert sort.synth.scene == "sort" and sort.policy.fusion == "resfilm"


# -- CLI ----------------------------------------------------------------------

def test_cli_unknown_config_key_exits_1(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", {"synth": {"n_demo": 3}})
    code, _, err = run_cli(capsys, "--config", cfg, "config")
    assert code == 1 and "synth.n_demo" in err


def test_cli_usage_errors_exit_1(capsys):
    assert run_cli(capsys, "frobnicate")[0] == 1
    assert run_cli(capsys, "train", "--horizon", "5")[0] == 1
    assert run_cli(capsys, "config", "--seed", "-1")[0] == 1


def test_cli_missing_input_exits_2(tmp_path, capsys):
    code, _, err = run_cli(capsys, "--data-dir", str(tmp_path), "track")
    assert code == 2 and "FormatError" in err


def test_cli_seed_after_subcommand(capsys):
    assert cli.main(["config", "--seed", "9"]) == 0
    assert json.loads(capsys.readouterr().out)["seed"] == 9
    cfg = cli._apply_overrides(PipelineConfig(), cli.build_parser().parse_args(["config", "--seed", "9"]))
    assert cfg.seed == 9


def test_cli_overrides_are_validated(tmp_path, capsys):
    code, _, err = run_cli(capsys, "--data-dir", str(tmp_path), "train", "--lr", "-1", "--steps", "0")
    assert code != 0


# -- full chain -------------------------------------------------------------------

def test_chain_reports_every_stage(chain):
    _, _, reports = chain
    assert [r["stage"] for r in reports] == list(pipeline.STAGES)
    assert all(not r.get("skipped", False) for r in reports)


def test_training_windows_fit_inside_demos(chain):
    cfg_path, root, reports = chain
    cfg = load_config(cfg_path)
    H = cfg.policy.horizon
    expected = cfg.synth.n_demos * (cfg.synth.n_steps - H + 1)
    assert reports[3]["samples"] == expected
    data = pipeline.build_training_set(cfg, root, pipeline.policy_config(cfg))
    assert data["x0"].shape == (expected, H * 10)
    assert data["f_pc"].shape == (expected, cfg.policy.obs_horizon, cfg.policy.feature_dim)


def test_tracking_matches_ground_truth(chain):
    cfg_path, root, _ = chain
    man = io.read_json(root / "synth" / "manifest.json")
    for demo in man["demos"]:
        est = pipeline.load_track(root / "track" / f"{demo['id']}.json")
        for e, t in zip(est, demo["transforms"]):
            gt = Se3Transform.from_dict(t)
            assert np.linalg.norm(e.translation - gt.translation) < 2e-3
            assert np.rad2deg(rotation_angle(e.rotation.T @ gt.rotation)) < 1.0


def test_resume_skips_unchanged_stages(chain, tmp_path, capsys):
    cfg_path, root, _ = chain
    code, reports, _ = run_cli(capsys, "--config", cfg_path, "--data-dir", str(root), "synth")
    assert code == 0 and reports[0]["skipped"]
    code, reports, _ = run_cli(capsys, "--config", cfg_path, "--data-dir", str(root), "track")
    assert reports[0]["skipped"]
    # a policy change leaves perception alone but retrains
    changed = json.loads(json.dumps(TINY))
    changed["policy"]["steps"] = 10
    cfg2 = write_config(tmp_path / "c2.json", changed)
    mirror = tmp_path / "data"
    shutil.copytree(root, mirror)
    code, reports, _ = run_cli(capsys, "--config", cfg2, "--data-dir", str(mirror), "run")
    skipped = {r["stage"]: r.get("skipped", False) for r in reports}
    assert skipped["synth"] and skipped["reconstruct"] and skipped["track"]
    assert not skipped["train"] and not skipped["rollout"]


def test_metrics_file(chain):
    _, root, reports = chain
    m = io.read_json(root / "eval" / "metrics.json")
    assert m["n_runs"] == 2 and sum(m["counts"].values()) == 2
    assert m["success_rate"] == reports[5]["success_rate"]
    for run in m["runs"]:
        assert len(run["step_translation_error"]) == 8


def test_metrics_match_naive_recomputation(chain):
    """Recompute the metrics straight from the rollout log and ground truth."""
    cfg_path, root, _ = chain
    cfg = load_config(cfg_path)
    m = io.read_json(root / "eval" / "metrics.json")
    log = [json.loads(line) for line in (root / "rollout" / "log.jsonl").read_text().splitlines()]
    truth = json.loads((root / "rollout" / "ground_truth.json").read_text())
    for run, gt in zip(m["runs"], truth["rollouts"]):
        entries = sorted((e for e in log if e["rollout"] == gt["rollout"]), key=lambda e: e["step"])
        te, re = [], []
        for e, g in zip(entries, gt["poses"]):
            te.append(np.sqrt(sum((a - b) ** 2 for a, b in zip(e["pose"]["translation"], g["translation"]))))
            R = np.array(e["pose"]["rotation"]).T @ np.array(g["rotation"])
            re.append(np.degrees(np.arccos(np.clip((np.trace(R) - 1) / 2, -1, 1))))
        np.testing.assert_allclose(run["step_translation_error"], te, atol=1e-12)
        np.testing.assert_allclose(run["step_rotation_error_deg"], re, atol=1e-5)
        ok = te[-1] < cfg.eval.translation_threshold and re[-1] < cfg.eval.rotation_threshold_deg
        if run["outcome"] != "process_failure":
            assert (run["outcome"] == "success") == ok
        f = np.array([[e["reference_force"], e["measured_force"]] for e in entries])
        assert run["force_rmse"] == pytest.approx(np.sqrt(np.mean((f[:, 0] - f[:, 1]) ** 2)))


def test_plot_outputs(chain):
    _, root, _ = chain
    log = pipeline.read_log(root / "rollout" / "log.jsonl")
    rows = (root / "plot" / "trajectories.csv").read_text().splitlines()
    assert rows[0] == "rollout,step,x,y,z" and len(rows) == len(log) + 1
    rows = (root / "plot" / "force.csv").read_text().splitlines()
    assert len(rows) == len(log) + 1
    losses = (root / "plot" / "loss.csv").read_text().splitlines()
    assert len(losses) == 200 + 1
    for name in ("loss.svg", "trajectories.svg", "force.svg"):
        tree = ET.parse(root / "plot" / name)
        assert tree.getroot().tag.endswith("svg")


def test_plot_with_empty_log(tmp_path, capsys):
    (tmp_path / "empty.jsonl").write_text("")
    out = tmp_path / "figs"
    code, reports, _ = run_cli(capsys, "--data-dir", str(tmp_path), "plot",
                               "--log", str(tmp_path / "empty.jsonl"), "--out", str(out))
    assert code == 0
    assert (out / "trajectories.csv").read_text() == "rollout,step,x,y,z\n"
    ET.parse(out / "force.svg")


def test_malformed_log_is_a_data_error(tmp_path, capsys):
    (tmp_path / "bad.jsonl").write_text("{not json\n")
    (tmp_path / "gt.json").write_text('{"rollouts": []}')
    code, _, err = run_cli(capsys, "--data-dir", str(tmp_path), "eval",
                           "--log", str(tmp_path / "bad.jsonl"), "--ground-truth", str(tmp_path / "gt.json"))
    assert code == 2 and "bad.jsonl:1" in err


# -- pieces -----------------------------------------------------------------------

def test_track_static_scene_is_identity():
    cfg = PipelineConfig()
    spec = synth.stack_spec(resolution=(160, 120))
    labels = [MANIPULATED if p.manipulated else 0 for p in spec.primitives]
    rendered = [synth.render_depth(spec, 0, v) for v in (0, 1)]
    cloud = pipeline.fuse_frame([r[0] for r in rendered], [r[1] for r in rendered], spec.cameras,
                                labels, cfg.reconstruct.voxel_size).select(MANIPULATED)
    (T,) = track_sequence([cloud, cloud], pipeline.icp_params(cfg))
    assert rotation_angle(T.rotation) < 1e-9 and np.linalg.norm(T.translation) < 1e-9


def _poses(offsets):
    return [Se3Transform.from_translation((x, 0, 0)) for x in offsets]


def test_evaluate_run_outcomes():
    gt = _poses([0.0, 0.01, 0.02])
    ok = pipeline.evaluate_run(gt, gt, [1, 1, 1], [1, 1, 1], 0.01, np.deg2rad(2.0))
    assert ok["outcome"] == "success" and ok["force_rmse"] == 0.0
    off = pipeline.evaluate_run(_poses([0.0, 0.01, 0.035]), gt, [], [], 0.01, np.deg2rad(2.0))
    assert off["outcome"] == "outcome_failure"
    assert off["final_translation_error"] == pytest.approx(0.015)
    stray = pipeline.evaluate_run(_poses([0.0, 0.2, 0.02]), gt, [], [], 0.01, np.deg2rad(2.0))
    assert stray["outcome"] == "process_failure"
    turned = [Se3Transform.from_rotvec((0, 0, np.deg2rad(3.0)), g.translation) for g in gt]
    assert pipeline.evaluate_run(turned, gt, [], [], 0.01, np.deg2rad(2.0))["outcome"] == "outcome_failure"
    with pytest.raises(LengthMismatch):
        pipeline.evaluate_run(gt[:2], gt, [], [], 0.01, 0.1)


def test_constant_offset_final_error():
    gt = _poses([0.0, 0.01, 0.02, 0.03])
    shifted = [Se3Transform(g.rotation, g.translation + (0.0, 0.1, 0.0)) for g in gt]
    m = pipeline.evaluate_run(shifted, gt, [], [], 0.02, np.deg2rad(2.0))
    assert m["final_translation_error"] == pytest.approx(0.1, abs=1e-12)
    np.testing.assert_allclose(m["step_translation_error"], 0.1, atol=1e-12)
    assert m["final_rotation_error_deg"] == 0.0 and m["outcome"] == "outcome_failure"


def test_chain_is_deterministic(chain, tmp_path, capsys):
    cfg_path, root, _ = chain
    code, _, _ = run_cli(capsys, "--config", cfg_path, "--data-dir", str(tmp_path / "again"), "run")
    assert code == 0
    for rel in ("eval/metrics.json", "train/policy.ocra", "rollout/log.jsonl", "plot/loss.svg"):
        assert (root / rel).read_bytes() == (tmp_path / "again" / rel).read_bytes(), rel
