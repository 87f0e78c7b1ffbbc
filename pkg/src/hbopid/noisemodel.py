"""Input-dependent noise model ``sigma(x) = z * exp(beta . rho(x)) + zeta``.

``rho`` is a polynomial feature map of inputs min-max normalised over the
search box. The model outputs a standard deviation; callers square it
before handing it to the GP as a noise variance.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar, nnls

FAMILIES = ("exponential", "polynomial")
MIN_FLOOR = 1e-6
RCOND = 1e-6
MAX_LOG_COEF = 100.0  # larger log-domain coefficients mean a degenerate fit


def feature_map(x, degree: int = 2, lower=None, upper=None, return_flag: bool = False):
    """Monomials of each normalised coordinate up to ``degree``, no cross terms.

    Rows of ``x`` are mapped to ``[1, u_1, ..., u_d, u_1^2, ..., u_d^degree]``
    where ``u = (x - lower) / (upper - lower)`` clipped to ``[0, 1]``. With no
    bounds the inputs are assumed already normalised.
    """
    if degree < 1:
        raise ValueError("degree must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if lower is not None:
        lower = np.asarray(lower, dtype=np.float64)
        upper = np.asarray(upper, dtype=np.float64)
        u = (x - lower) / (upper - lower)
    else:
        u = x
    clipped = np.clip(u, 0.0, 1.0)
    outside = bool(np.any(clipped != u))
    feats = [np.ones((u.shape[0], 1))] + [clipped**p for p in range(1, degree + 1)]
    out = np.hstack(feats)
    out = out[0] if single else out
    return (out, outside) if return_flag else out


def feature_dim(d: int, degree: int) -> int:
    return 1 + d * degree


@dataclass(frozen=True)
class NoiseModel:
    family: str = "exponential"
    scale: float = 1.0  # z
    coef: tuple[float, ...] = (0.0,)  # beta
    floor: float = 0.0  # zeta
    degree: int = 2
    lower: tuple[float, ...] | None = None
    upper: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown noise family {self.family!r}")
        if self.scale < 0 or self.floor < 0:
            raise ValueError("scale and floor must be >= 0")
        object.__setattr__(self, "coef", tuple(float(c) for c in self.coef))

    @classmethod
    def constant(cls, sigma: float, d: int = 1, degree: int = 2) -> NoiseModel:
        return cls("exponential", float(sigma), (0.0,) * feature_dim(d, degree), 0.0, degree)

    def features(self, x):
        return feature_map(x, self.degree, self.lower, self.upper)

    def __call__(self, x) -> np.ndarray:
        return predict_sigma(self, x)

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "scale": self.scale,
            "coef": list(self.coef),
            "floor": self.floor,
            "degree": self.degree,
        }


def predict_sigma(model: NoiseModel, x) -> np.ndarray:
    """Noise standard deviation at each row of ``x``."""
    rho = model.features(x)
    coef = np.asarray(model.coef)
    if rho.shape[-1] != coef.size:
        raise ValueError(f"feature dimension {rho.shape[-1]} does not match {coef.size} coefficients")
    lin = rho @ coef
    if model.family == "exponential":
        return model.scale * np.exp(lin) + model.floor
    return np.maximum(model.scale * lin, model.floor)


def _loglinear(rho, nu, floor, tiny):
    # singular directions (clustered inputs) are truncated rather than
    # allowed to produce runaway coefficients
    target = np.log(np.maximum(nu - floor, tiny))
    sol, *_ = np.linalg.lstsq(rho, target, rcond=RCOND)
    return sol


def fit_noise(
    x,
    residuals,
    degree: int = 2,
    family: str = "exponential",
    lower=None,
    upper=None,
) -> NoiseModel:
    """Regress residual magnitudes onto the noise model.

    Exponential family: for a fixed floor the log-excess ``log(nu - zeta)``
    is linear in the features, so ``beta`` and ``log z`` come from ordinary
    least squares; ``zeta`` itself is picked by a bounded 1-D search in
    ``[0, min(nu))`` minimising the fit error in the original units.
    Polynomial family: non-negative least squares of ``nu`` on the features.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    nu = np.abs(np.asarray(residuals, dtype=np.float64).reshape(-1))
    if x.shape[0] != nu.size:
        raise ValueError("inputs and residuals differ in length")
    d = x.shape[1]
    bounds = dict(
        lower=None if lower is None else tuple(np.asarray(lower, dtype=float)),
        upper=None if upper is None else tuple(np.asarray(upper, dtype=float)),
    )
    m = feature_dim(d, degree)
    if nu.size < max(5, m + 1):
        warnings.warn(
            f"{nu.size} residuals are too few for {m} features; using a constant noise model",
            RuntimeWarning,
        )
        sigma = float(np.mean(nu)) if nu.size else MIN_FLOOR
        return NoiseModel("exponential", max(sigma, MIN_FLOOR), (0.0,) * m, 0.0, degree, **bounds)

    rho = feature_map(x, degree, lower, upper)

    if family == "polynomial":
        coef, _ = nnls(rho, nu)
        return NoiseModel("polynomial", 1.0, tuple(coef), MIN_FLOOR, degree, **bounds)
    if family != "exponential":
        raise ValueError(f"unknown noise family {family!r}")

    # near-zero residuals would dominate the log-domain fit
    tiny = max(1e-3 * float(np.max(nu)), 1e-12)
    top = float(np.min(nu))

    def sse(floor):
        sol = _loglinear(rho, nu, floor, tiny)
        pred = np.exp(rho @ sol) + floor
        return float(np.sum((pred - nu) ** 2))

    floor = 0.0
    if top > MIN_FLOOR:
        grid = np.concatenate([[0.0], top * np.linspace(0.05, 0.95, 19)])
        vals = [sse(f) for f in grid]
        i = int(np.argmin(vals))
        lo = grid[max(i - 1, 0)]
        hi = grid[min(i + 1, len(grid) - 1)] if i + 1 < len(grid) else top * 0.999
        res = minimize_scalar(sse, bounds=(lo, hi), method="bounded", options={"xatol": 1e-9 * max(top, 1e-12)})
        floor = float(res.x) if res.fun <= vals[i] else float(grid[i])
    floor = max(floor, MIN_FLOOR) if top > MIN_FLOOR else MIN_FLOOR
    sol = _loglinear(rho, nu, floor, tiny)
    if not (np.all(np.isfinite(sol)) and np.max(np.abs(sol)) < MAX_LOG_COEF):
        warnings.warn("noise fit is degenerate; using a constant noise model", RuntimeWarning)
        return NoiseModel("exponential", max(float(np.mean(nu)), MIN_FLOOR), (0.0,) * m, 0.0, degree, **bounds)
    scale = math.exp(sol[0])
    coef = np.concatenate([[0.0], sol[1:]])
    return NoiseModel("exponential", scale, tuple(coef), floor, degree, **bounds)
