"""Rigid-body quadrotor simulator.

State layout used by the compiled kernels (flat float64 vector of length 17)::

    [0:3]   position p, inertial frame (m)
    [3:7]   attitude q, scalar-first unit quaternion, body -> inertial
    [7:10]  velocity v, inertial frame (m/s)
    [10:13] angular velocity w, body frame (rad/s)
    [13:17] rotor speeds Omega (rad/s)

Rotors sit in an X configuration at distance L from the centre of mass::

    r1 = d(+1, +1)  CCW        r2 = d(-1, +1)  CW
    r3 = d(-1, -1)  CCW        r4 = d(+1, -1)  CW       d = L / sqrt(2)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

STATE_DIM = 17
SQRT2 = math.sqrt(2.0)

# spin signs: reaction torque on the body is -C_tau * Omega^2 for a CCW rotor
_SX = np.array([1.0, 1.0, -1.0, -1.0])
_SY = np.array([-1.0, 1.0, 1.0, -1.0])
_SZ = np.array([-1.0, 1.0, -1.0, 1.0])


class SimulationDiverged(RuntimeError):
    """Raised when the simulated state or command stops being finite."""


@dataclass(frozen=True)
class QuadrotorParams:
    mass: float = 0.027
    gravity: float = 9.81
    arm_length: float = 0.0397
    inertia: tuple[float, float, float] = (1.40e-5, 1.40e-5, 2.17e-5)
    thrust_coeff: float = 2.88e-8
    torque_coeff: float = 7.24e-10
    motor_time_constant: float = 0.02
    motor_gain: float = 2.81e-2
    motor_bias: float = 426.24
    pwm_max: float = 65535.0

    def __post_init__(self):
        positive = {
            "mass": self.mass,
            "gravity": self.gravity,
            "arm_length": self.arm_length,
            "thrust_coeff": self.thrust_coeff,
            "torque_coeff": self.torque_coeff,
            "motor_time_constant": self.motor_time_constant,
            "motor_gain": self.motor_gain,
            "pwm_max": self.pwm_max,
        }
        for name, value in positive.items():
            if not (value > 0 and math.isfinite(value)):
                raise ValueError(f"{name} must be positive and finite, got {value}")
        if len(self.inertia) != 3 or not all(j > 0 for j in self.inertia):
            raise ValueError(f"inertia must be three positive values, got {self.inertia}")
        if not self.motor_bias >= 0:
            raise ValueError(f"motor_bias must be >= 0, got {self.motor_bias}")

    def as_array(self) -> np.ndarray:
        """Pack into the flat vector consumed by the compiled kernels."""
        return np.array(
            [
                self.mass,
                self.gravity,
                self.arm_length,
                *self.inertia,
                self.thrust_coeff,
                self.torque_coeff,
                self.motor_time_constant,
                self.motor_gain,
                self.motor_bias,
                self.pwm_max,
            ],
            dtype=np.float64,
        )

    @property
    def hover_speed(self) -> float:
        """Rotor speed at which four rotors exactly balance gravity."""
        return math.sqrt(self.mass * self.gravity / (4.0 * self.thrust_coeff))

    @property
    def hover_pwm(self) -> float:
        return (self.hover_speed - self.motor_bias) / self.motor_gain

    @property
    def max_speed(self) -> float:
        return self.motor_gain * self.pwm_max + self.motor_bias


PRESETS = {"crazyflie-27g": QuadrotorParams()}


def preset(name: str) -> QuadrotorParams:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown quadrotor preset {name!r}; known: {sorted(PRESETS)}") from None


@dataclass
class RigidBodyState:
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    attitude: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    angular_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.attitude = np.asarray(self.attitude, dtype=np.float64).reshape(4)
        self.velocity = np.asarray(self.velocity, dtype=np.float64).reshape(3)
        self.angular_velocity = np.asarray(self.angular_velocity, dtype=np.float64).reshape(3)

    @property
    def rotation(self) -> np.ndarray:
        return rotation_matrix(self.attitude)

    @property
    def euler(self) -> np.ndarray:
        """(roll, pitch, yaw) in the ZYX convention."""
        return _euler(self.attitude)


@dataclass
class MotorState:
    speeds: np.ndarray = field(default_factory=lambda: np.zeros(4))

    def __post_init__(self):
        self.speeds = np.asarray(self.speeds, dtype=np.float64).reshape(4)
        if np.any(self.speeds < 0):
            raise ValueError("rotor speeds must be >= 0")


@dataclass
class ActuatorCommand:
    pwm: np.ndarray

    def __post_init__(self):
        self.pwm = np.asarray(self.pwm, dtype=np.float64).reshape(4)


@dataclass(frozen=True)
class DisturbanceModel:
    """Zero-mean Gaussian force/torque whose std grows affinely with speed.

    Torque defaults are the force defaults times a tenth of the arm length;
    at the full arm length the noise exceeds what the 20 rad/s^2 attitude
    limit can reject on the 27 g airframe.
    """

    force_std: float = 0.005
    force_std_per_speed: float = 0.01
    torque_std: float = 0.005 * 0.0397 * 0.1
    torque_std_per_speed: float = 0.01 * 0.0397 * 0.1

    def __post_init__(self):
        for name in ("force_std", "force_std_per_speed", "torque_std", "torque_std_per_speed"):
            value = getattr(self, name)
            if not (value >= 0 and math.isfinite(value)):
                raise ValueError(f"{name} must be >= 0, got {value}")

    @classmethod
    def none(cls) -> DisturbanceModel:
        return cls(0.0, 0.0, 0.0, 0.0)

    @property
    def is_zero(self) -> bool:
        return not any((self.force_std, self.force_std_per_speed, self.torque_std, self.torque_std_per_speed))

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.force_std, self.force_std_per_speed, self.torque_std, self.torque_std_per_speed],
            dtype=np.float64,
        )


# ---------------------------------------------------------------------------
# compiled kernels


@njit(cache=True)
def _rotation(q):
    w, x, y, z = q[0], q[1], q[2], q[3]
    r = np.empty((3, 3))
    r[0, 0] = 1.0 - 2.0 * (y * y + z * z)
    r[0, 1] = 2.0 * (x * y - w * z)
    r[0, 2] = 2.0 * (x * z + w * y)
    r[1, 0] = 2.0 * (x * y + w * z)
    r[1, 1] = 1.0 - 2.0 * (x * x + z * z)
    r[1, 2] = 2.0 * (y * z - w * x)
    r[2, 0] = 2.0 * (x * z - w * y)
    r[2, 1] = 2.0 * (y * z + w * x)
    r[2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return r


@njit(cache=True)
def _euler(q):
    w, x, y, z = q[0], q[1], q[2], q[3]
    roll = math.atan2(2.0 * (w * x + y * z), 1.0 - 2.0 * (x * x + y * y))
    s = 2.0 * (w * y - z * x)
    s = min(1.0, max(-1.0, s))
    pitch = math.asin(s)
    yaw = math.atan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z))
    out = np.empty(3)
    out[0] = roll
    out[1] = pitch
    out[2] = yaw
    return out


@njit(cache=True)
def _yaw(q):
    w, x, y, z = q[0], q[1], q[2], q[3]
    return math.atan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z))


@njit(cache=True)
def _wrenches(speeds, pv):
    """Body-frame collective thrust (scalar along e3) and moment from rotor speeds."""
    cf = pv[6]
    ct = pv[7]
    d = pv[2] / SQRT2
    f1 = cf * speeds[0] * speeds[0]
    f2 = cf * speeds[1] * speeds[1]
    f3 = cf * speeds[2] * speeds[2]
    f4 = cf * speeds[3] * speeds[3]
    m = np.empty(3)
    m[0] = d * (f1 + f2 - f3 - f4)
    m[1] = d * (-f1 + f2 + f3 - f4)
    k = ct / cf
    m[2] = k * (-f1 + f2 - f3 + f4)
    return f1 + f2 + f3 + f4, m


@njit(cache=True)
def _deriv(x, speed_ss, fext, text, pv):
    mass, g = pv[0], pv[1]
    jx, jy, jz = pv[3], pv[4], pv[5]
    tm = pv[8]
    q = x[3:7]
    w = x[10:13]
    thrust, moment = _wrenches(x[13:17], pv)
    r = _rotation(q)

    dx = np.empty(STATE_DIM)
    dx[0:3] = x[7:10]
    for i in range(3):
        dx[7 + i] = (r[i, 2] * thrust + fext[i]) / mass
    dx[9] -= g

    qw, qx, qy, qz = q[0], q[1], q[2], q[3]
    wx, wy, wz = w[0], w[1], w[2]
    dx[3] = 0.5 * (-qx * wx - qy * wy - qz * wz)
    dx[4] = 0.5 * (qw * wx + qy * wz - qz * wy)
    dx[5] = 0.5 * (qw * wy - qx * wz + qz * wx)
    dx[6] = 0.5 * (qw * wz + qx * wy - qy * wx)

    hx, hy, hz = jx * wx, jy * wy, jz * wz
    mx = moment[0] + text[0] - (wy * hz - wz * hy)
    my = moment[1] + text[1] - (wz * hx - wx * hz)
    mz = moment[2] + text[2] - (wx * hy - wy * hx)
    dx[10] = mx / jx
    dx[11] = my / jy
    dx[12] = mz / jz

    for i in range(4):
        dx[13 + i] = (speed_ss[i] - x[13 + i]) / tm
    return dx


@njit(cache=True)
def _rk4(x, pwm, fext, text, dt, pv):
    speed_ss = np.empty(4)
    for i in range(4):
        speed_ss[i] = pv[9] * pwm[i] + pv[10]
    k1 = _deriv(x, speed_ss, fext, text, pv)
    k2 = _deriv(x + 0.5 * dt * k1, speed_ss, fext, text, pv)
    k3 = _deriv(x + 0.5 * dt * k2, speed_ss, fext, text, pv)
    k4 = _deriv(x + dt * k3, speed_ss, fext, text, pv)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    qn = math.sqrt(out[3] ** 2 + out[4] ** 2 + out[5] ** 2 + out[6] ** 2)
    for i in range(3, 7):
        out[i] /= qn
    for i in range(13, 17):
        if out[i] < 0.0:
            out[i] = 0.0
    return out


@njit(cache=True)
def _disturbance(x, noise, dist):
    speed = math.sqrt(x[7] ** 2 + x[8] ** 2 + x[9] ** 2)
    sf = dist[0] + dist[1] * speed
    st = dist[2] + dist[3] * speed
    fext = np.empty(3)
    text = np.empty(3)
    for i in range(3):
        fext[i] = sf * noise[i]
        text[i] = st * noise[3 + i]
    return fext, text


@njit(cache=True)
def _headroom(base, delta, lo, hi):
    """Largest s in [0, 1] keeping lo <= base + s*delta <= hi for every motor."""
    s = 1.0
    for i in range(4):
        if delta[i] > 0.0 and base[i] + delta[i] > hi:
            s = min(s, max(0.0, (hi - base[i]) / delta[i]))
        elif delta[i] < 0.0 and base[i] + delta[i] < lo:
            s = min(s, max(0.0, (lo - base[i]) / delta[i]))
    return s


@njit(cache=True)
def _mix(thrust, torque, pv):
    cf, ct = pv[6], pv[7]
    d = pv[2] / SQRT2
    km, bm, hmax = pv[9], pv[10], pv[11]
    f_lo = cf * bm * bm
    top = km * hmax + bm
    f_hi = cf * top * top

    collective = min(max(thrust, 4.0 * f_lo), 4.0 * f_hi)
    base = np.full(4, collective / 4.0)
    rp = np.empty(4)
    yw = np.empty(4)
    for i in range(4):
        rp[i] = (_SX[i] * torque[0] + _SY[i] * torque[1]) / (4.0 * d)
        yw[i] = _SZ[i] * torque[2] * cf / (4.0 * ct)
    base = base + _headroom(base, rp, f_lo, f_hi) * rp
    per_motor = base + _headroom(base, yw, f_lo, f_hi) * yw

    pwm = np.empty(4)
    for i in range(4):
        speed = math.sqrt(max(per_motor[i], 0.0) / cf)
        pwm[i] = min(max((speed - bm) / km, 0.0), hmax)
    return pwm


# ---------------------------------------------------------------------------
# public API


def rotation_matrix(q) -> np.ndarray:
    return _rotation(np.asarray(q, dtype=np.float64))


def pack_state(state: RigidBodyState, motors: MotorState) -> np.ndarray:
    return np.concatenate(
        [state.position, state.attitude, state.velocity, state.angular_velocity, motors.speeds]
    )


def unpack_state(x: np.ndarray) -> tuple[RigidBodyState, MotorState]:
    x = np.asarray(x, dtype=np.float64)
    return (
        RigidBodyState(x[0:3].copy(), x[3:7].copy(), x[7:10].copy(), x[10:13].copy()),
        MotorState(x[13:17].copy()),
    )


def total_thrust(motors: MotorState, params: QuadrotorParams) -> np.ndarray:
    """Body-frame thrust vector C_f * sum(Omega_i^2) * e3."""
    thrust, _ = _wrenches(motors.speeds, params.as_array())
    return np.array([0.0, 0.0, thrust])


def total_moment(motors: MotorState, params: QuadrotorParams) -> np.ndarray:
    """Body-frame moment from rotor reaction torques and thrust lever arms."""
    _, moment = _wrenches(motors.speeds, params.as_array())
    return moment


def derivative(state: RigidBodyState, motors: MotorState, params: QuadrotorParams) -> RigidBodyState:
    """Time derivative of the rigid-body state under the current rotor speeds.

    The returned object reuses the RigidBodyState container; its fields hold
    (p_dot, q_dot, v_dot, w_dot). Motor dynamics are excluded because they
    depend on the command.
    """
    x = pack_state(state, motors)
    dx = _deriv(x, motors.speeds.copy(), np.zeros(3), np.zeros(3), params.as_array())
    return RigidBodyState(dx[0:3], dx[3:7], dx[7:10], dx[10:13])


def step(
    state: RigidBodyState,
    motors: MotorState,
    cmd: ActuatorCommand,
    params: QuadrotorParams,
    dt: float = 0.01,
    disturbance: DisturbanceModel | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[RigidBodyState, MotorState]:
    """Advance plant and motors by one RK4 step of length ``dt``.

    The disturbance is drawn once per step from ``rng`` and held constant
    over the step.
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    x = pack_state(state, motors)
    pwm = np.asarray(cmd.pwm, dtype=np.float64)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(pwm))):
        raise SimulationDiverged("non-finite state or command")
    if np.any(pwm < 0) or np.any(pwm > params.pwm_max):
        raise ValueError(f"PWM command outside [0, {params.pwm_max}]: {pwm}")

    if disturbance is None or disturbance.is_zero:
        fext, text = np.zeros(3), np.zeros(3)
    else:
        if rng is None:
            raise ValueError("a random generator is required for a nonzero disturbance")
        fext, text = _disturbance(x, rng.standard_normal(6), disturbance.as_array())
    out = _rk4(x, pwm, fext, text, dt, params.as_array())
    if not np.all(np.isfinite(out)):
        raise SimulationDiverged("state became non-finite during integration")
    return unpack_state(out)


def mix(thrust_cmd: float, torque_cmd, params: QuadrotorParams) -> ActuatorCommand:
    """Allocate collective thrust and body torques to per-motor PWM.

    Saturation keeps collective thrust first, then roll/pitch, then yaw,
    shrinking each torque group uniformly to fit the motor limits.
    """
    if not thrust_cmd >= 0:
        raise ValueError(f"thrust command must be >= 0, got {thrust_cmd}")
    torque = np.asarray(torque_cmd, dtype=np.float64).reshape(3)
    return ActuatorCommand(_mix(float(thrust_cmd), torque, params.as_array()))


def steady_speeds(cmd: ActuatorCommand, params: QuadrotorParams) -> MotorState:
    """Rotor speeds the motors settle to under a held PWM command."""
    return MotorState(params.motor_gain * cmd.pwm + params.motor_bias)


def hover_motors(params: QuadrotorParams) -> MotorState:
    return MotorState(np.full(4, params.hover_speed))
