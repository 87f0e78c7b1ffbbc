import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hbopid.control import (
    BASELINE_PID,
    LOOPS,
    ControllerConfig,
    ParameterSet,
    PidGains,
    PidState,
    cascade_step,
    inner_loop,
    outer_loop,
    pid_step,
    wrap_angle,
)
from hbopid.dynamics import QuadrotorParams, RigidBodyState
from hbopid.trajectory import ReferencePoint

Q = QuadrotorParams()
CFG = ControllerConfig()
ZERO = ParameterSet.from_array(np.zeros((4, 3)))


def ref_at(p, yaw=0.0):
    return ReferencePoint(np.asarray(p, dtype=float), yaw)


def test_pure_p():
    out, _ = pid_step(PidGains(1, 0, 0), PidState(), 0.5, 0.01)
    assert out == 0.5


def test_integral_rectangle_rule():
    mem, out = PidState(), 0.0
    for _ in range(10):
        out, mem = pid_step(PidGains(0, 1, 0), mem, 1.0, 0.1)
    assert out == pytest.approx(1.0, abs=1e-12)


def test_derivative_zero_on_first_call():
    out, mem = pid_step(PidGains(0, 0, 1), PidState(), 3.0, 0.01)
    assert out == 0.0 and mem.initialized
    out, _ = pid_step(PidGains(0, 0, 1), mem, 4.0, 0.01)
    assert out == pytest.approx(100.0)


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=40), st.floats(0.1, 5.0))
def test_integral_respects_windup(errors, bound):
    mem = PidState()
    for e in errors:
        _, mem = pid_step(PidGains(0, 1, 0), mem, e, 0.05, windup=bound)
        assert abs(mem.integral) <= bound + 1e-12


def test_pid_rejects_non_finite():
    with pytest.raises(ValueError):
        pid_step(PidGains(1, 0, 0), PidState(), float("nan"), 0.01)
    with pytest.raises(ValueError):
        PidGains(-1, 0, 0)


def test_parameter_set_needs_all_loops():
    with pytest.raises(ValueError):
        ParameterSet({"pos_xy": PidGains()})
    assert ParameterSet.from_dict(BASELINE_PID.to_dict()) == BASELINE_PID
    assert list(BASELINE_PID.gains) == list(LOOPS)


def test_outer_equilibrium():
    f, ang, _ = outer_loop(RigidBodyState(), ref_at([0, 0, 0], 0.3), BASELINE_PID, CFG, Q, 0.01)
    assert f == pytest.approx(Q.mass * Q.gravity, rel=1e-12)
    assert np.allclose(ang, [0, 0, 0.3])


def test_outer_pitch_forward_for_positive_x_error():
    _, ang, _ = outer_loop(RigidBodyState(), ref_at([1, 0, 0]), BASELINE_PID, CFG, Q, 0.01)
    assert ang[1] > 0 and ang[0] == 0.0


def test_outer_accel_clamp():
    gains = ParameterSet({"pos_xy": PidGains(10, 0, 0), "pos_z": PidGains(0, 0, 0),
                          "att_rp": PidGains(), "att_yaw": PidGains()})
    # 1 m x error with kp = 10 asks for 10 m/s^2; clamp to 5 and tilt = 5/g
    _, ang, _ = outer_loop(RigidBodyState(), ref_at([1, 0, 0]), gains, ControllerConfig(max_tilt=1.0), Q, 0.01)
    assert ang[1] == pytest.approx(5.0 / Q.gravity)


def test_inner_equilibrium_and_clamp():
    tau, _ = inner_loop(RigidBodyState(), np.zeros(3), BASELINE_PID, CFG, Q, 0.01)
    assert np.allclose(tau, 0.0)
    big = ParameterSet({"pos_xy": PidGains(), "pos_z": PidGains(), "att_rp": PidGains(100, 0, 0),
                        "att_yaw": PidGains()})
    tau, _ = inner_loop(RigidBodyState(), np.array([0.5, 0, 0]), big, CFG, Q, 0.01)
    assert tau[0] == pytest.approx(Q.inertia[0] * CFG.angular_accel_limit)


def test_yaw_error_wraps_to_short_way():
    eps = 0.01
    gains = ParameterSet({"pos_xy": PidGains(), "pos_z": PidGains(), "att_rp": PidGains(),
                          "att_yaw": PidGains(1, 0, 0)})
    tau, _ = inner_loop(RigidBodyState(), np.array([0, 0, 2 * math.pi - eps]), gains, CFG, Q, 0.01)
    assert tau[2] == pytest.approx(-Q.inertia[2] * eps)


@given(st.floats(-50, 50))
def test_wrap_range(a):
    w = wrap_angle(a)
    assert -math.pi < w <= math.pi + 1e-12
    assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-9)


def test_cascade_hover_command():
    cmd, _ = cascade_step(BASELINE_PID, None, RigidBodyState(), ref_at([0, 0, 0]), CFG, Q, 0.01)
    assert np.allclose(cmd.pwm, 38792, atol=1.0)


def test_cascade_climb_raises_all_motors():
    gains = ParameterSet({"pos_xy": PidGains(1, 0, 0), "pos_z": PidGains(1, 0, 0),
                          "att_rp": PidGains(1, 0, 0), "att_yaw": PidGains(1, 0, 0)})
    cmd, _ = cascade_step(gains, None, RigidBodyState(), ref_at([0, 0, 1]), CFG, Q, 0.01)
    assert np.all(cmd.pwm > Q.hover_pwm)


def test_zero_gains_keep_gravity_feedforward():
    f, _, _ = outer_loop(RigidBodyState(), ref_at([3, -2, 1]), ZERO, CFG, Q, 0.01)
    assert f == Q.mass * Q.gravity


def test_cascade_is_pure_in_memory():
    mem = np.zeros((6, 3))
    a, m1 = cascade_step(BASELINE_PID, mem, RigidBodyState(), ref_at([0.1, 0, 0]), CFG, Q, 0.01)
    b, m2 = cascade_step(BASELINE_PID, mem, RigidBodyState(), ref_at([0.1, 0, 0]), CFG, Q, 0.01)
    assert np.array_equal(mem, np.zeros((6, 3)))
    assert np.array_equal(a.pwm, b.pwm) and np.array_equal(m1, m2)


@given(
    pos=st.lists(st.floats(-5, 5), min_size=3, max_size=3),
    vel=st.lists(st.floats(-5, 5), min_size=3, max_size=3),
    kp=st.floats(0, 50),
    kd=st.floats(0, 50),
)
def test_commanded_accelerations_respect_limits(pos, vel, kp, kd):
    gains = ParameterSet({"pos_xy": PidGains(kp, 0, kd), "pos_z": PidGains(kp, 0, kd),
                          "att_rp": PidGains(kp * 10, 0, kd), "att_yaw": PidGains(kp, 0, kd)})
    s = RigidBodyState(position=np.array(pos), velocity=np.array(vel))
    f, ang, mem = outer_loop(s, ref_at([0, 0, 0]), gains, CFG, Q, 0.01)
    assert np.all(np.abs(ang[:2]) <= CFG.max_tilt + 1e-12)
    # vertical specific force never exceeds g + c_t before tilt compensation
    assert f * math.cos(ang[0]) * math.cos(ang[1]) <= Q.mass * (Q.gravity + CFG.accel_limit) + 1e-12
    tau, _ = inner_loop(s, np.array([1.0, -1.0, 3.0]), gains, CFG, Q, 0.01, mem)
    assert np.all(np.abs(tau) <= np.asarray(Q.inertia) * CFG.angular_accel_limit + 1e-15)


def test_config_validation():
    with pytest.raises(ValueError):
        ControllerConfig(accel_limit=0)
    with pytest.raises(ValueError):
        ControllerConfig(outer_every=0)
