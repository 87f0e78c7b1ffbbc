"""Reference trajectories and tracking-error metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


KINDS = ("ellipse", "clover", "spiral", "hover")


@dataclass(frozen=True)
class ReferencePoint:
    position: np.ndarray
    yaw: float = 0.0


@dataclass(frozen=True)
class TrajectorySpec:
    kind: str = "ellipse"
    semi_major: float = 1.0  # ellipse a
    semi_minor: float = 0.6  # ellipse b
    amplitude: float = 1.0  # clover petal length A
    radius: float = 0.8  # spiral R
    climb_rate: float = 0.02  # spiral c, m/s
    period: float = 12.5
    altitude: float = 1.0
    duration: float = 50.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown trajectory kind {self.kind!r}; expected one of {KINDS}")
        for name in ("semi_major", "semi_minor", "amplitude", "radius", "period", "duration"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not (math.isfinite(self.altitude) and math.isfinite(self.climb_rate)):
            raise ValueError("altitude and climb_rate must be finite")

    @property
    def max_speed(self) -> float:
        """Upper bound on the reference speed, used for continuity checks."""
        w = 2.0 * math.pi / self.period
        if self.kind == "ellipse":
            return w * max(self.semi_major, self.semi_minor)
        if self.kind == "clover":
            return 2.0 * w * self.amplitude
        if self.kind == "spiral":
            return math.hypot(w * self.radius, self.climb_rate)
        return 0.0


def sample_many(spec: TrajectorySpec, t) -> np.ndarray:
    """Vectorised sampler: returns an (N, 4) array of (x, y, z, yaw)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if np.any(t < 0) or np.any(t > spec.duration * (1 + 1e-12)):
        raise ValueError(f"times must lie in [0, {spec.duration}]")
    theta = 2.0 * np.pi * t / spec.period
    out = np.zeros((t.size, 4))
    out[:, 2] = spec.altitude
    if spec.kind == "ellipse":
        out[:, 0] = spec.semi_major * np.cos(theta)
        out[:, 1] = spec.semi_minor * np.sin(theta)
    elif spec.kind == "clover":
        r = spec.amplitude * np.cos(2.0 * theta)
        out[:, 0] = r * np.cos(theta)
        out[:, 1] = r * np.sin(theta)
    elif spec.kind == "spiral":
        out[:, 0] = spec.radius * np.cos(theta)
        out[:, 1] = spec.radius * np.sin(theta)
        out[:, 2] += spec.climb_rate * t
    return out


def sample(spec: TrajectorySpec, t: float) -> ReferencePoint:
    row = sample_many(spec, [t])[0]
    return ReferencePoint(row[:3].copy(), float(row[3]))


def default_specs() -> dict[str, TrajectorySpec]:
    return {kind: TrajectorySpec(kind=kind) for kind in ("ellipse", "clover", "spiral")}


@dataclass
class ErrorReport:
    position_error: float  # m
    yaw_error: float  # rad
    combined: float
    alpha: float
    position_series: np.ndarray
    yaw_series: np.ndarray

    @property
    def yaw_error_deg(self) -> float:
        return math.degrees(self.yaw_error)


def yaw_from_quaternions(q) -> np.ndarray:
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    w, x, y, z = q.T
    return np.arctan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z))


def wrap(angles) -> np.ndarray:
    angles = np.asarray(angles, dtype=np.float64)
    return angles - 2.0 * np.pi * np.ceil((angles - np.pi) / (2.0 * np.pi))


def error_metrics(positions, attitudes, refs, dt: float, alpha: float = 0.1) -> ErrorReport:
    """Time-averaged position and yaw errors by the rectangle rule.

    ``positions`` is (N, 3), ``attitudes`` (N, 4) quaternions, ``refs`` (N, 4)
    rows of (x_d, y_d, z_d, yaw_d).
    """
    positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    refs = np.atleast_2d(np.asarray(refs, dtype=np.float64))
    yaw = yaw_from_quaternions(attitudes)
    n = positions.shape[0]
    if n == 0:
        raise ValueError("cannot compute errors of an empty series")
    if refs.shape[0] != n or yaw.shape[0] != n:
        raise ValueError(f"series lengths differ: {n}, {yaw.shape[0]}, {refs.shape[0]}")
    if not dt > 0:
        raise ValueError("dt must be positive")
    ep = np.linalg.norm(positions - refs[:, :3], axis=1)
    epsi = np.abs(wrap(yaw - refs[:, 3]))
    horizon = n * dt
    e_p = float(np.sum(ep) * dt / horizon)
    e_psi = float(np.sum(epsi) * dt / horizon)
    return ErrorReport(e_p, e_psi, e_p + alpha * e_psi, alpha, ep, epsi)


__all__ = [
    "ErrorReport",
    "ReferencePoint",
    "TrajectorySpec",
    "default_specs",
    "error_metrics",
    "sample",
    "sample_many",
    "wrap",
    "yaw_from_quaternions",
]
