"""Bayesian tuning of cascade PID controllers for a simulated quadrotor."""

from .control import BASELINE_PID, ControllerConfig, ParameterSet, PidGains
from .dynamics import DisturbanceModel, QuadrotorParams, RigidBodyState, SimulationDiverged
from .gp import GpModel, Kernel
from .noisemodel import NoiseModel, fit_noise
from .optimizer import (
    HboConfig,
    OptimizationTrace,
    SearchSpace,
    bo_run,
    expected_improvement,
    hbo_run,
    rs_run,
    two_stage_run,
)
from .rollout import RolloutResult, rollout
from .trajectory import ErrorReport, TrajectorySpec

__all__ = [
    "BASELINE_PID",
    "ControllerConfig",
    "DisturbanceModel",
    "ErrorReport",
    "GpModel",
    "HboConfig",
    "Kernel",
    "NoiseModel",
    "OptimizationTrace",
    "ParameterSet",
    "PidGains",
    "QuadrotorParams",
    "RigidBodyState",
    "RolloutResult",
    "SearchSpace",
    "SimulationDiverged",
    "TrajectorySpec",
    "bo_run",
    "expected_improvement",
    "fit_noise",
    "hbo_run",
    "rollout",
    "rs_run",
    "two_stage_run",
]
