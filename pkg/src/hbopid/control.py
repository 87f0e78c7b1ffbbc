"""Cascade PID: position loop -> (thrust, desired Euler angles) -> attitude loop -> torques.

Gains are grouped into four loops, each row of the gain matrix is (Kp, Ki, Kd)::

    0 pos_xy   shared by x and y position
    1 pos_z
    2 att_rp   shared by roll and pitch
    3 att_yaw

Controller memory is a (6, 3) array, one row per axis (x, y, z, roll, pitch,
yaw) holding (integral, previous error, initialized flag).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .dynamics import ActuatorCommand, QuadrotorParams, RigidBodyState, SimulationDiverged, _euler, _mix

LOOPS = ("pos_xy", "pos_z", "att_rp", "att_yaw")
GAINS = ("kp", "ki", "kd")
TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class PidGains:
    kp: float = 0.0
    ki: float = 0.0
    kd: float = 0.0

    def __post_init__(self):
        for name in GAINS:
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ValueError(f"gain {name} must be finite and >= 0, got {value}")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.kp, self.ki, self.kd)


@dataclass
class PidState:
    integral: float = 0.0
    prev_error: float = 0.0
    initialized: bool = False


@dataclass(frozen=True)
class ParameterSet:
    """Full gain set for the four loop groups."""

    gains: dict = field(default_factory=dict)

    def __post_init__(self):
        missing = [name for name in LOOPS if name not in self.gains]
        extra = [name for name in self.gains if name not in LOOPS]
        if missing or extra:
            raise ValueError(f"parameter set needs exactly loops {LOOPS}; missing={missing} extra={extra}")
        ordered = {}
        for name in LOOPS:
            g = self.gains[name]
            ordered[name] = g if isinstance(g, PidGains) else PidGains(*g)
        object.__setattr__(self, "gains", ordered)

    def __getitem__(self, loop: str) -> PidGains:
        return self.gains[loop]

    def as_array(self) -> np.ndarray:
        return np.array([self.gains[name].as_tuple() for name in LOOPS], dtype=np.float64)

    @classmethod
    def from_array(cls, arr) -> ParameterSet:
        arr = np.asarray(arr, dtype=np.float64).reshape(len(LOOPS), 3)
        return cls({name: PidGains(*map(float, row)) for name, row in zip(LOOPS, arr)})

    def replace(self, loop: str, gain: str, value: float) -> ParameterSet:
        arr = self.as_array()
        arr[LOOPS.index(loop), GAINS.index(gain)] = value
        return ParameterSet.from_array(arr)

    def to_dict(self) -> dict:
        return {name: dict(zip(GAINS, self.gains[name].as_tuple())) for name in LOOPS}

    @classmethod
    def from_dict(cls, data: dict) -> ParameterSet:
        return cls({name: PidGains(**data[name]) for name in data})


# Hand-tuned for the crazyflie-27g preset; holds hover and tracks the default
# trajectories without retuning.
BASELINE_PID = ParameterSet(
    {
        "pos_xy": PidGains(2.0, 0.2, 2.0),
        "pos_z": PidGains(4.0, 0.5, 3.0),
        "att_rp": PidGains(80.0, 0.0, 12.0),
        "att_yaw": PidGains(20.0, 0.5, 6.0),
    }
)

PARAMETER_PRESETS = {"baseline-pid": BASELINE_PID}


@dataclass(frozen=True)
class ControllerConfig:
    accel_limit: float = 5.0
    angular_accel_limit: float = 20.0
    windup: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    max_tilt: float = 0.5
    outer_every: int = 1  # outer loop runs every k-th inner tick

    def __post_init__(self):
        if not (self.accel_limit > 0 and self.angular_accel_limit > 0 and self.max_tilt > 0):
            raise ValueError("controller limits must be positive")
        if len(self.windup) != 4 or not all(b > 0 for b in self.windup):
            raise ValueError("windup needs four positive bounds (one per loop)")
        if self.outer_every < 1:
            raise ValueError("outer_every must be >= 1")

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.accel_limit, self.angular_accel_limit, self.max_tilt, *self.windup],
            dtype=np.float64,
        )


def new_memory() -> np.ndarray:
    return np.zeros((6, 3))


# ---------------------------------------------------------------------------
# compiled kernels


@njit(cache=True)
def _wrap(angle):
    """Map to (-pi, pi]."""
    return angle - TWO_PI * math.ceil((angle - math.pi) / TWO_PI)


@njit(cache=True)
def _pid(kp, ki, kd, bound, mem, row, error, dt):
    integral = mem[row, 0] + error * dt
    integral = min(max(integral, -bound), bound)
    deriv = 0.0
    if mem[row, 2] > 0.5:
        deriv = (error - mem[row, 1]) / dt
    mem[row, 0] = integral
    mem[row, 1] = error
    mem[row, 2] = 1.0
    return kp * error + ki * integral + kd * deriv


@njit(cache=True)
def _outer(gains, cfg, pv, mem, x, ref, dt):
    accel = np.empty(3)
    for axis in range(3):
        loop = 0 if axis < 2 else 1
        err = ref[axis] - x[axis]
        accel[axis] = _pid(gains[loop, 0], gains[loop, 1], gains[loop, 2], cfg[3 + loop], mem, axis, err, dt)
    norm = math.sqrt(accel[0] ** 2 + accel[1] ** 2 + accel[2] ** 2)
    if norm > cfg[0]:
        accel *= cfg[0] / norm

    g = pv[1]
    psi = ref[3]
    s, c = math.sin(psi), math.cos(psi)
    tilt = cfg[2]
    roll = min(max((accel[0] * s - accel[1] * c) / g, -tilt), tilt)
    pitch = min(max((accel[0] * c + accel[1] * s) / g, -tilt), tilt)
    thrust = pv[0] * (g + accel[2]) / (math.cos(roll) * math.cos(pitch))
    if thrust < 0.0:
        thrust = 0.0
    angles = np.empty(3)
    angles[0] = roll
    angles[1] = pitch
    angles[2] = psi
    return thrust, angles


@njit(cache=True)
def _inner(gains, cfg, pv, mem, x, angles, dt):
    euler = _euler(x[3:7])
    torque = np.empty(3)
    for axis in range(3):
        loop = 2 if axis < 2 else 3
        err = _wrap(angles[axis] - euler[axis])
        alpha = _pid(gains[loop, 0], gains[loop, 1], gains[loop, 2], cfg[3 + loop], mem, 3 + axis, err, dt)
        alpha = min(max(alpha, -cfg[1]), cfg[1])
        torque[axis] = pv[3 + axis] * alpha
    return torque


@njit(cache=True)
def _cascade(gains, cfg, pv, mem, x, ref, dt):
    thrust, angles = _outer(gains, cfg, pv, mem, x, ref, dt)
    torque = _inner(gains, cfg, pv, mem, x, angles, dt)
    return _mix(thrust, torque, pv)


# ---------------------------------------------------------------------------
# public API


def wrap_angle(angle: float) -> float:
    return float(_wrap(float(angle)))


def pid_step(gains: PidGains, mem: PidState, error: float, dt: float, windup: float = 1.0) -> tuple[float, PidState]:
    """One rectangle-rule PID update; derivative is zero on the first call."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if not math.isfinite(error):
        raise ValueError(f"non-finite error {error}")
    buf = np.array([[mem.integral, mem.prev_error, 1.0 if mem.initialized else 0.0]])
    out = _pid(gains.kp, gains.ki, gains.kd, windup, buf, 0, float(error), float(dt))
    return float(out), PidState(float(buf[0, 0]), float(buf[0, 1]), True)


def _state_vec(state: RigidBodyState) -> np.ndarray:
    return np.concatenate([state.position, state.attitude, state.velocity, state.angular_velocity])


def _ref_vec(ref) -> np.ndarray:
    return np.array([*ref.position, ref.yaw], dtype=np.float64)


def outer_loop(state, ref, params: ParameterSet, cfg: ControllerConfig, quad: QuadrotorParams, dt: float, mem=None):
    """Position PID -> (collective thrust [N], desired (roll, pitch, yaw) [rad], memory)."""
    mem = new_memory() if mem is None else mem.copy()
    thrust, angles = _outer(
        params.as_array(), cfg.as_array(), quad.as_array(), mem, _state_vec(state), _ref_vec(ref), dt
    )
    return float(thrust), angles, mem


def inner_loop(state, angles, params: ParameterSet, cfg: ControllerConfig, quad: QuadrotorParams, dt: float, mem=None):
    """Attitude PID -> body torque [N m] and updated memory."""
    mem = new_memory() if mem is None else mem.copy()
    torque = _inner(
        params.as_array(), cfg.as_array(), quad.as_array(), mem, _state_vec(state),
        np.asarray(angles, dtype=np.float64), dt,
    )
    return torque, mem


def cascade_step(params: ParameterSet, mem, state, ref, cfg: ControllerConfig, quad: QuadrotorParams, dt: float):
    """Full controller tick. Returns (command, new memory); input memory is untouched."""
    x = _state_vec(state)
    if not np.all(np.isfinite(x)):
        raise SimulationDiverged("non-finite state passed to controller")
    mem = new_memory() if mem is None else np.array(mem, dtype=np.float64)
    pwm = _cascade(params.as_array(), cfg.as_array(), quad.as_array(), mem, x, _ref_vec(ref), dt)
    return ActuatorCommand(pwm), mem
