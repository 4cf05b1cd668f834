import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ocra.config import ControlSection
from ocra.control import (GripperPlant, PidState, camera_to_robot, cumulative_transform,
                          execute_rollout, pid_step, track_force)
from ocra.errors import DataError, EmptyList, NonPositiveDt
from ocra.geometry import Se3Transform, random_transform


def reference_loop():
    c = ControlSection()
    return PidState(c.kp, c.ki, c.kd, c.lo, c.hi), GripperPlant(c.plant_gain, c.dt)


def settling_step(measured, ref, band=0.02):
    outside = np.flatnonzero(np.abs(np.asarray(measured) - ref) > band * abs(ref))
    return 0 if len(outside) == 0 else int(outside[-1]) + 1


def test_pid_first_call_and_terms():
    s = PidState(kp=2.0, ki=1.0, kd=0.5)
    assert pid_step(s, 1.0, 0.0, 0.1) == pytest.approx(2.0 + 0.1)       # no derivative on first call
    assert pid_step(s, 1.0, 0.5, 0.1) == pytest.approx(1.0 + 0.15 + 0.5 * (0.5 - 1.0) / 0.1)


def test_pid_validation():
    with pytest.raises(NonPositiveDt):
        pid_step(PidState(1.0), 1.0, 0.0, 0.0)
    with pytest.raises(DataError):
        PidState(1.0, lo=1.0, hi=0.0)
    with pytest.raises(DataError):
        GripperPlant(gain=0.0)


def test_step_settles_within_band():
    pid, plant = reference_loop()
    for ref in (0.5, 3.0, 8.0):
        pid.reset()
        plant.force = 0.0
        meas = [m for _, m in track_force(pid, plant, ref, 400)]
        assert settling_step(meas, ref) <= 200
        assert abs(meas[-1] - ref) < 1e-4 * ref


def test_integral_removes_steady_state_error():
    _, plant = reference_loop()
    p_only = [m for _, m in track_force(PidState(2.0, 0.0, 0.0, 0.0, 10.0), plant, 3.0, 2000)]
    plant.force = 0.0
    pi = [m for _, m in track_force(PidState(2.0, 8.0, 0.0, 0.0, 10.0), plant, 3.0, 2000)]
    assert abs(p_only[-1] - 3.0) > 0.5             # proportional-only droop: ref / (1 + kp)
    assert abs(pi[-1] - 3.0) < 1e-9


@settings(max_examples=50, deadline=None)
@given(st.floats(-20, 20), st.floats(0.1, 5), st.floats(0.0, 20), st.floats(0.0, 0.2),
       st.integers(0, 2 ** 16))
def test_bounds_never_violated(ref, kp, ki, noise, seed):
    pid = PidState(kp, ki, 0.1, lo=-2.0, hi=5.0)
    plant = GripperPlant(5.0, 0.01, noise, seed=seed)
    rng = np.random.default_rng(seed)
    for _ in range(300):
        r = ref if rng.random() < 0.9 else -ref
        u = pid_step(pid, r, plant.measure(), plant.dt)
        plant.step(u)
        assert -2.0 <= u <= 5.0
        assert abs(pid.integral) <= pid.integral_limit


def test_cumulative_transform_order():
    a = Se3Transform.from_translation((1, 0, 0))
    b = Se3Transform.from_rotvec((0, 0, np.pi / 2))
    # a first, then b
    np.testing.assert_allclose(cumulative_transform([a, b]).apply([0, 0, 0]), [0, 1, 0], atol=1e-12)
    with pytest.raises(EmptyList):
        cumulative_transform([])


def test_camera_to_robot_conjugation():
    rng = np.random.default_rng(0)
    E, T = random_transform(rng), random_transform(rng)
    p = rng.standard_normal(3)
    # moving a point in the camera frame then mapping == mapping then moving in the robot frame
    np.testing.assert_allclose(E.apply(T.apply(p)), camera_to_robot(T, E).apply(E.apply(p)), atol=1e-12)


def test_execute_rollout_log():
    step = Se3Transform.from_translation((0.01, 0, 0))
    chunks = [([step] * 4, np.full((4, 1), 2.0)), ([step] * 4, None)]
    pid, plant = reference_loop()
    log = execute_rollout(chunks, Se3Transform.identity(), plant, pid)
    assert [e["step"] for e in log] == list(range(8))
    np.testing.assert_allclose(log[-1]["pose"]["translation"], [0.08, 0, 0], atol=1e-12)
    assert log[0]["reference_force"] == 2.0 and log[-1]["reference_force"] == 0.0
