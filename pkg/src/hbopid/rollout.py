"""Closed-loop rollout of the cascade controller on the simulator."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
from numba import njit

from .control import ControllerConfig, ParameterSet, _inner, _outer
from .dynamics import (
    STATE_DIM,
    DisturbanceModel,
    QuadrotorParams,
    _disturbance,
    _mix,
    _rk4,
)
from .trajectory import ErrorReport, TrajectorySpec, error_metrics, sample_many

DIVERGENCE_RADIUS = 50.0


@njit(cache=True)
def _simulate(x0, gains, cfg, outer_every, pv, refs, noise, dist, dt, radius):
    """Run the controller/plant loop; returns (states, steps completed, diverged)."""
    n = noise.shape[0]
    states = np.empty((n + 1, STATE_DIM))
    states[0] = x0
    mem = np.zeros((6, 3))
    x = x0.copy()
    zero = np.zeros(3)
    use_noise = dist[0] + dist[1] + dist[2] + dist[3] > 0.0
    thrust = 0.0
    angles = np.zeros(3)
    for k in range(n):
        if k % outer_every == 0:
            thrust, angles = _outer(gains, cfg, pv, mem, x, refs[k], dt * outer_every)
        torque = _inner(gains, cfg, pv, mem, x, angles, dt)
        pwm = _mix(thrust, torque, pv)
        if use_noise:
            fext, text = _disturbance(x, noise[k], dist)
        else:
            fext, text = zero, zero
        x = _rk4(x, pwm, fext, text, dt, pv)
        states[k + 1] = x
        bad = False
        for i in range(STATE_DIM):
            if not math.isfinite(x[i]):
                bad = True
        if bad or math.sqrt(x[0] ** 2 + x[1] ** 2 + x[2] ** 2) > radius:
            return states[: k + 2], k + 1, True
    return states, n, False


@dataclass
class RolloutResult:
    report: ErrorReport | None
    times: np.ndarray
    states: np.ndarray  # (N + 1, 17) including the initial state
    refs: np.ndarray  # (N + 1, 4)
    diverged: bool
    wall_time: float

    @property
    def steps(self) -> int:
        return self.states.shape[0] - 1

    def series_table(self) -> np.ndarray:
        """Rows of t, x, y, z, yaw, x_d, y_d, z_d, yaw_d, ep_inst, epsi_inst."""
        from .trajectory import wrap, yaw_from_quaternions

        yaw = yaw_from_quaternions(self.states[:, 3:7])
        ep = np.linalg.norm(self.states[:, :3] - self.refs[:, :3], axis=1)
        epsi = np.abs(wrap(yaw - self.refs[:, 3]))
        return np.column_stack([self.times, self.states[:, :3], yaw, self.refs, ep, epsi])


def rollout(
    params: ParameterSet,
    trajectory: TrajectorySpec,
    quad: QuadrotorParams | None = None,
    controller: ControllerConfig | None = None,
    disturbance: DisturbanceModel | None = None,
    seed: int = 0,
    dt: float = 0.01,
    alpha: float = 0.1,
    duration: float | None = None,
) -> RolloutResult:
    """Fly ``params`` along ``trajectory`` starting on the reference in hover.

    ``duration`` truncates the trajectory (used by the short first stage of
    two-stage tuning). Errors are averaged over the post-step samples.
    """
    quad = quad or QuadrotorParams()
    controller = controller or ControllerConfig()
    disturbance = disturbance if disturbance is not None else DisturbanceModel()
    horizon = trajectory.duration if duration is None else min(duration, trajectory.duration)
    n = int(round(horizon / dt))
    if n < 1:
        raise ValueError(f"rollout horizon {horizon} s is shorter than one step of {dt} s")

    times = np.arange(n + 1) * dt
    refs = sample_many(trajectory, np.minimum(times, trajectory.duration))
    noise = np.random.default_rng(seed).standard_normal((n, 6))

    x0 = np.zeros(STATE_DIM)
    x0[0:3] = refs[0, :3]
    half = 0.5 * refs[0, 3]
    x0[3], x0[6] = math.cos(half), math.sin(half)
    x0[13:17] = quad.hover_speed

    start = time.perf_counter()
    states, done, diverged = _simulate(
        x0,
        params.as_array(),
        controller.as_array(),
        controller.outer_every,
        quad.as_array(),
        refs,
        noise,
        disturbance.as_array(),
        dt,
        DIVERGENCE_RADIUS,
    )
    wall = time.perf_counter() - start

    refs = refs[: done + 1]
    times = times[: done + 1]
    report = None
    tail = states[1:]
    finite = np.all(np.isfinite(tail), axis=1)
    if np.any(finite):
        keep = np.flatnonzero(finite)
        report = error_metrics(tail[keep, :3], tail[keep, 3:7], refs[1:][keep], dt, alpha)
    return RolloutResult(report, times, states, refs, bool(diverged), wall)
