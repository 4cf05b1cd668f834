"""Trajectory composition, camera-to-robot transfer and PID grip-force tracking."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, EmptyList, NonPositiveDt, OcraError
from .geometry import Se3Transform, compose_all


def cumulative_transform(transforms) -> Se3Transform:
    """``T_t ... T_1`` for the list ``[T_1, ..., T_t]``.

    The first listed transform is applied first; the object pose after ``t``
    steps is ``cumulative_transform(ts) @ initial_pose``.
    """
    ts = list(transforms)
    if not ts:
        raise EmptyList("cumulative_transform needs at least one transform")
    return compose_all(ts[::-1])


def camera_to_robot(T_cam: Se3Transform, extrinsic: Se3Transform) -> Se3Transform:
    """Express a camera-frame motion in the robot frame: ``E T E^-1`` with
    ``extrinsic`` mapping camera coordinates to robot coordinates."""
    return extrinsic @ T_cam @ extrinsic.inverse()


@dataclass
class PidState:
    kp: float
    ki: float = 0.0
    kd: float = 0.0
    lo: float = -np.inf
    hi: float = np.inf
    integral_limit: float | None = None
    integral: float = 0.0
    prev_error: float | None = None

    def __post_init__(self):
        if not self.lo < self.hi:
            raise DataError(f"output limits need lo < hi, got [{self.lo}, {self.hi}]")
        if self.integral_limit is None:
            bound = max(abs(self.lo), abs(self.hi))
            self.integral_limit = bound / self.ki if self.ki > 0 and np.isfinite(bound) else np.inf
        if self.integral_limit < 0:
            raise DataError("integral_limit must be non-negative")

    def reset(self):
        self.integral = 0.0
        self.prev_error = None


def pid_step(state: PidState, reference_force: float, measured_force: float, dt: float) -> float:
    """One PID update; returns the clamped command and mutates ``state``.

    The integral is clamped to ``+-integral_limit`` (anti-windup). The
    derivative term is zero on the first call.
    """
    if not dt > 0:
        raise NonPositiveDt(f"dt must be positive, got {dt}")
    e = float(reference_force) - float(measured_force)
    state.integral = float(np.clip(state.integral + e * dt, -state.integral_limit, state.integral_limit))
    de = 0.0 if state.prev_error is None else (e - state.prev_error) / dt
    state.prev_error = e
    u = state.kp * e + state.ki * state.integral + state.kd * de
    return float(np.clip(u, state.lo, state.hi))


@dataclass
class GripperPlant:
    """First-order contact model ``f <- f + g (u - f) dt`` with noisy readout."""
    gain: float = 5.0
    dt: float = 0.01
    noise: float = 0.0
    force: float = 0.0
    seed: int = 0
    rng: np.random.Generator = field(default=None, repr=False)

    def __post_init__(self):
        if not self.gain > 0:
            raise DataError("plant gain must be positive")
        if not self.dt > 0:
            raise NonPositiveDt(f"plant dt must be positive, got {self.dt}")
        if self.rng is None:
            self.rng = np.random.default_rng(self.seed)

    def step(self, command: float) -> float:
        self.force = self.force + self.gain * (command - self.force) * self.dt
        return self.force

    def measure(self) -> float:
        if self.noise > 0:
            return self.force + float(self.rng.normal(0.0, self.noise))
        return self.force


def track_force(pid: PidState, plant: GripperPlant, reference: float, n_steps: int) -> list:
    """Run the closed loop for ``n_steps`` ticks; returns (command, measured) pairs."""
    out = []
    for _ in range(n_steps):
        meas = plant.measure()
        u = pid_step(pid, reference, meas, plant.dt)
        plant.step(u)
        out.append((u, plant.measure()))
    return out


def _force_reference(forces, i) -> float:
    if forces is None:
        return 0.0
    f = np.asarray(forces, dtype=float)
    if f.ndim == 1:
        return float(f[i])
    if f.shape[1] == 0:
        return 0.0
    return float(np.linalg.norm(f[i])) if f.shape[1] > 1 else float(f[i, 0])


def execute_rollout(chunks, extrinsic: Se3Transform, plant: GripperPlant, pid: PidState,
                    initial_pose: Se3Transform | None = None, substeps: int = 20,
                    force_scale: float = 1.0) -> list:
    """Execute action chunks step by step.

    Each chunk is ``(transforms, forces)``: camera-frame per-step transforms
    and a per-step grip-force reference (``None`` for vision-only chunks).
    Motions are accumulated, moved into the robot frame and applied to
    ``initial_pose``; the PID loop runs ``substeps`` plant ticks per action
    step against ``force_scale * reference``. Returns one log dict per step.
    """
    pose0 = initial_pose or Se3Transform.identity()
    cum = Se3Transform.identity()
    log = []
    k = 0
    for c, (transforms, forces) in enumerate(chunks):
        for i, T in enumerate(transforms):
            try:
                cum = T @ cum
                pose = camera_to_robot(cum, extrinsic) @ pose0
                ref = force_scale * _force_reference(forces, i)
                ticks = track_force(pid, plant, ref, substeps)
            except OcraError as e:
                raise type(e)(f"rollout step {k} (chunk {c}, index {i}): {e}") from e
            u, meas = ticks[-1]
            log.append({"step": k, "pose": pose.to_dict(), "reference_force": ref,
                        "command": u, "measured_force": meas, "force_error": ref - meas})
            k += 1
    return log
