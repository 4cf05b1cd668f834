import numpy as np
import pytest

from ocra import io
from ocra.errors import DataError, FrameOutOfRange
from ocra.geometry import CameraModel, Se3Transform, rotation_angle
from ocra.synth import (BLOCK_SIZE, Primitive, SceneSpec, constant_velocity_trajectory,
                        demo_variant, gen_demo_dataset, make_camera, render_depth, sort_specs,
                        stack_spec)


def test_constant_velocity_reaches_goal_uniformly():
    start = Se3Transform.from_rotvec((0, 0, 0.1), (0.0, -0.1, 0.1))
    goal = Se3Transform.from_rotvec((0, 0, 0.5), (0.1, 0.0, 0.05))
    steps = constant_velocity_trajectory(start, goal, 8)
    pose = start
    centres = [pose.translation]
    for T in steps:
        pose = T @ pose
        centres.append(pose.translation)
    np.testing.assert_allclose(pose.matrix(), goal.matrix(), atol=1e-12)
    d = np.linalg.norm(np.diff(centres, axis=0), axis=1)
    np.testing.assert_allclose(d, d[0], rtol=1e-9)
    angles = [rotation_angle(T.rotation) for T in steps]
    np.testing.assert_allclose(angles, 0.4 / 8, rtol=1e-9)


def test_render_box_depth_oracle():
    box = Primitive("box", (0.2, 0.2, 0.2), Se3Transform.identity())
    # looking straight down from z = 1
    cam = CameraModel(60.0, 60.0, 32.0, 24.0, 64, 48, Se3Transform.from_rotvec((np.pi, 0, 0), (0, 0, 1.0)))
    spec = SceneSpec((box,), (), (cam, cam))
    depth, masks = render_depth(spec, 0, 0)
    # the top face is at z = 0.1, i.e. depth 0.9 wherever it is seen
    assert depth.values[24, 32] == pytest.approx(0.9, abs=1e-9)
    np.testing.assert_allclose(depth.values[masks[0].bits], 0.9, atol=1e-9)
    assert masks[0].bits[24, 32] and not masks[0].bits[0, 0]
    with pytest.raises(FrameOutOfRange):
        render_depth(spec, 1, 0)


def test_stack_scene_clearance():
    spec = stack_spec()
    m = spec.manipulated_index
    base = spec.primitives[0]
    half = np.asarray(BLOCK_SIZE) / 2
    corners = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)]) * half
    for f in range(spec.n_frames):
        world = spec.pose_at(m, f).apply(corners)
        # no corner of the moving block sinks into the base or the table
        assert np.all(base.signed_distance(world) > -1e-9)
        assert np.all(world[:, 2] > -1e-9)
    last = spec.pose_at(m, spec.n_frames - 1)
    assert last.translation[2] == pytest.approx(0.06)


def test_sort_specs_differ_only_in_weight_and_goal():
    heavy, light = sort_specs()
    assert heavy.weight > light.weight
    mh, ml = heavy.manipulated_index, light.manipulated_index
    assert heavy.primitives[mh].size == light.primitives[ml].size
    assert heavy.pose_at(mh, heavy.n_frames - 1).translation[0] > 0
    assert light.pose_at(ml, light.n_frames - 1).translation[0] < 0
    np.testing.assert_array_equal(heavy.primitives[mh].pose.matrix(), light.primitives[ml].pose.matrix())


def test_demo_variant_offsets_within_jitter():
    spec = stack_spec()
    m = spec.manipulated_index
    rng = np.random.default_rng(0)
    for u in ([0, 0], [1, 1], [0.5, 0.25]):
        v = demo_variant(spec, rng, 0.03, u)
        off = v.primitives[m].pose.translation - spec.primitives[m].pose.translation
        np.testing.assert_allclose(off, [(2 * u[0] - 1) * 0.03, (2 * u[1] - 1) * 0.03, 0], atol=1e-15)
        np.testing.assert_allclose(v.pose_at(m, v.n_frames - 1).matrix(),
                                   spec.pose_at(m, spec.n_frames - 1).matrix(), atol=1e-12)
    assert demo_variant(spec, rng, 0.0) is spec


def test_scene_validation():
    with pytest.raises(DataError):
        Primitive("cone", 1.0)
    with pytest.raises(DataError):
        Primitive("box", (1.0, -1.0, 1.0))
    cam = make_camera((1, 0, 0), (0, 0, 0))
    with pytest.raises(DataError):
        SceneSpec((Primitive("sphere", 0.1),), (), (cam,))


def test_dataset_layout_and_starts(tmp_path):
    specs = sort_specs(n_steps=2, resolution=(64, 48))
    man = gen_demo_dataset(specs, 6, tmp_path, seed=3, start_jitter=0.03)
    assert [d["class"] for d in man["demos"]] == [0, 1, 0, 1, 0, 1]
    assert io.read_json(tmp_path / "manifest.json") == man
    for d in man["demos"]:
        start = np.array(d["poses"][0]["translation"])
        assert np.all(np.abs(start[:2] - np.array([0.0, -0.14])) <= 0.03 + 1e-12)
        assert len(d["frames"]) == 3
        depth = io.load_depth(tmp_path / d["frames"][0]["depth"][0])
        assert depth.values.shape == (48, 64)
    # the two classes share geometry; only the weight differs
    w = {d["class"]: d["weight"] for d in man["demos"]}
    assert w[0] > w[1]
