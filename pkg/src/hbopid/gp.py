"""Gaussian-process regression with a per-observation noise diagonal."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize

log = logging.getLogger(__name__)

FAMILIES = ("matern52", "se")
JITTERS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)
VARIANCE_BOUNDS = (1e-6, 1e4)
NOISE_BOUNDS = (1e-10, 1e4)
LENGTHSCALE_RANGE = (1e-2, 1e2)  # multiples of the data span per dimension
SQRT5 = math.sqrt(5.0)


class IllConditionedError(LinAlgError):
    """Covariance stayed non-positive-definite after maximum jitter."""


@dataclass(frozen=True)
class Kernel:
    family: str = "matern52"
    variance: float = 1.0
    lengthscales: tuple[float, ...] = (1.0,)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}")
        if not self.variance > 0:
            raise ValueError("kernel variance must be positive")
        ls = tuple(float(v) for v in np.atleast_1d(self.lengthscales))
        if not all(v > 0 for v in ls):
            raise ValueError("lengthscales must be positive")
        object.__setattr__(self, "lengthscales", ls)

    @property
    def dim(self) -> int:
        return len(self.lengthscales)

    def _scaled_sq(self, a, b):
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        b = np.atleast_2d(np.asarray(b, dtype=np.float64))
        if a.shape[1] != self.dim or b.shape[1] != self.dim:
            raise ValueError(f"input dimension {a.shape[1]}/{b.shape[1]} does not match {self.dim} lengthscales")
        ls = np.asarray(self.lengthscales)
        diff = (a[:, None, :] - b[None, :, :]) / ls
        return diff * diff

    def __call__(self, a, b) -> np.ndarray:
        """Covariance matrix between row sets ``a`` and ``b``."""
        r2 = self._scaled_sq(a, b).sum(axis=-1)
        return self.variance * _shape(self.family, r2)

    def to_dict(self) -> dict:
        return {"family": self.family, "variance": self.variance, "lengthscales": list(self.lengthscales)}

    @classmethod
    def from_dict(cls, data: dict) -> Kernel:
        return cls(data["family"], float(data["variance"]), tuple(data["lengthscales"]))


def _shape(family, r2):
    if family == "se":
        return np.exp(-0.5 * r2)
    r = np.sqrt(np.maximum(r2, 0.0))
    return (1.0 + SQRT5 * r + (5.0 / 3.0) * r2) * np.exp(-SQRT5 * r)


def kernel_eval(k: Kernel, x, x2) -> float:
    return float(k(np.reshape(x, (1, -1)), np.reshape(x2, (1, -1)))[0, 0])


@dataclass
class Posterior:
    mean: np.ndarray
    std: np.ndarray


@dataclass
class GpModel:
    X: np.ndarray
    y: np.ndarray
    noise: np.ndarray  # per-point noise variance
    kernel: Kernel
    prior_mean: float
    chol: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    jitter: float = 0.0
    log_likelihood: float = float("nan")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def predict(self, Xs) -> Posterior:
        return predict(self, Xs)

    def to_dict(self) -> dict:
        return {
            "X": self.X.tolist(),
            "y": self.y.tolist(),
            "noise": self.noise.tolist(),
            "kernel": self.kernel.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> GpModel:
        """Rebuild (and refactor) a model from :meth:`to_dict` output."""
        return fit(data["X"], data["y"], data["noise"], Kernel.from_dict(data["kernel"]))


def _check_inputs(X, y, noise):
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    n = X.shape[0]
    if n < 1 or y.shape[0] != n:
        raise ValueError(f"need matching X ({n} rows) and y ({y.shape[0]}) with n >= 1")
    noise = np.broadcast_to(np.asarray(noise, dtype=np.float64), (n,)).copy()
    if np.any(noise < 0) or not np.all(np.isfinite(noise)):
        raise ValueError("noise variances must be finite and >= 0")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("training data must be finite")
    return X, y, noise


def _check_conflicts(X, y, noise):
    """Reject repeated noiseless inputs whose observations disagree."""
    exact = noise == 0
    if np.count_nonzero(exact) < 2:
        return
    idx = np.flatnonzero(exact)
    _, inverse = np.unique(X[idx], axis=0, return_inverse=True)
    inverse = np.asarray(inverse).reshape(-1)
    for group in np.unique(inverse):
        vals = y[idx[inverse == group]]
        if vals.size > 1 and np.ptp(vals) > 0:
            raise IllConditionedError("duplicated noiseless inputs with different observations")


def _factor(K, scale):
    """Cholesky with escalating jitter; returns (L, jitter used)."""
    for rel in JITTERS:
        jitter = rel * scale
        try:
            L = cholesky(K + jitter * np.eye(K.shape[0]), lower=True, check_finite=False)
        except LinAlgError:
            continue
        if np.all(np.diag(L) > 0):
            return L, jitter
    raise IllConditionedError("covariance is not positive definite even with maximum jitter")


def fit(X, y, noise_diag, kernel: Kernel) -> GpModel:
    """Condition a GP with constant mean mean(y) on noisy observations."""
    X, y, noise = _check_inputs(X, y, noise_diag)
    _check_conflicts(X, y, noise)
    mean = float(np.mean(y))
    K = kernel(X, X) + np.diag(noise)
    L, jitter = _factor(K, kernel.variance)
    if jitter > 0:
        log.debug("added jitter %.3g to GP covariance (n=%d)", jitter, X.shape[0])
    resid = y - mean
    alpha = cho_solve((L, True), resid, check_finite=False)
    lml = -0.5 * resid @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * len(y) * math.log(2 * math.pi)
    return GpModel(X, y, noise, kernel, mean, L, alpha, jitter, float(lml))


def predict(model: GpModel, Xs) -> Posterior:
    """Latent posterior mean and std; query-point noise is not added."""
    if model is None or model.chol is None:
        raise ValueError("model is not fitted")
    Xs = np.atleast_2d(np.asarray(Xs, dtype=np.float64))
    Ks = model.kernel(Xs, model.X)
    mean = model.prior_mean + Ks @ model.alpha
    v = solve_triangular(model.chol, Ks.T, lower=True, check_finite=False)
    var = model.kernel.variance - np.sum(v * v, axis=0)
    return Posterior(mean, np.sqrt(np.maximum(var, 0.0)))


def loo_residuals(model: GpModel) -> np.ndarray:
    """Leave-one-out prediction errors ``y_i - mu_{-i}(x_i)`` in closed form."""
    n = model.n
    Kinv = cho_solve((model.chol, True), np.eye(n), check_finite=False)
    return model.alpha / np.diag(Kinv)


# ---------------------------------------------------------------------------
# hyperparameters


def _lml_and_grad(theta, X, resid, noise, family, learn_noise):
    """Negative log marginal likelihood and its gradient in log-parameters.

    theta = [log variance, log lengthscales..., (log noise)].
    """
    n, d = X.shape
    variance = math.exp(theta[0])
    ls = np.exp(theta[1 : 1 + d])
    diff = (X[:, None, :] - X[None, :, :]) / ls
    sq = diff * diff
    r2 = sq.sum(axis=-1)
    if family == "se":
        Kf = variance * np.exp(-0.5 * r2)
        dshape = Kf  # dk/dlog l_j = k * sq_j
    else:
        r = np.sqrt(r2)
        e = np.exp(-SQRT5 * r)
        Kf = variance * (1.0 + SQRT5 * r + (5.0 / 3.0) * r2) * e
        dshape = variance * (5.0 / 3.0) * (1.0 + SQRT5 * r) * e
    diag = noise + (math.exp(theta[-1]) if learn_noise else 0.0)
    K = Kf + np.diag(diag)
    try:
        L, jitter = _factor(K, variance)
    except IllConditionedError:
        return 1e25, np.zeros_like(theta)
    alpha = cho_solve((L, True), resid, check_finite=False)
    nll = 0.5 * resid @ alpha + np.sum(np.log(np.diag(L))) + 0.5 * n * math.log(2 * math.pi)
    Kinv = cho_solve((L, True), np.eye(n), check_finite=False)
    W = np.outer(alpha, alpha) - Kinv
    grad = np.empty_like(theta)
    grad[0] = -0.5 * np.sum(W * Kf)
    for j in range(d):
        grad[1 + j] = -0.5 * np.sum(W * dshape * sq[:, :, j])
    if learn_noise:
        grad[-1] = -0.5 * math.exp(theta[-1]) * np.trace(W)
    return float(nll), grad


@dataclass
class HyperFit:
    kernel: Kernel
    noise: float | None  # learned constant noise variance, if requested
    log_likelihood: float
    fell_back: bool = False


def optimize_hyperparams(
    X,
    y,
    noise_diag=0.0,
    family: str = "matern52",
    learn_noise: bool = False,
    seed: int = 0,
    n_restarts: int = 3,
) -> HyperFit:
    """Maximise the log marginal likelihood over kernel (and optional noise) parameters.

    A coarse isotropic log-grid plus a few seeded random points pick the
    starting points; the best ``n_restarts`` are refined with L-BFGS-B.
    """
    X, y, noise = _check_inputs(X, y, noise_diag)
    n, d = X.shape
    if n < 3:
        raise ValueError("need at least 3 observations to fit hyperparameters")
    resid = y - y.mean()
    span = np.maximum(np.ptp(X, axis=0), 1e-12)
    yvar = max(float(np.var(y)), VARIANCE_BOUNDS[0])

    bounds = [tuple(np.log(VARIANCE_BOUNDS))]
    bounds += [(math.log(LENGTHSCALE_RANGE[0] * s), math.log(LENGTHSCALE_RANGE[1] * s)) for s in span]
    if learn_noise:
        bounds.append(tuple(np.log(NOISE_BOUNDS)))
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])

    starts = []
    for v in (0.1, 1.0, 10.0):
        for l in (0.05, 0.2, 0.7):
            noises = (1e-6, 1e-2, 0.3) if learn_noise else (None,)
            for nz in noises:
                th = [math.log(v * yvar)] + [math.log(l * s) for s in span]
                if learn_noise:
                    th.append(math.log(max(nz * yvar, NOISE_BOUNDS[0])))
                starts.append(th)
    rng = np.random.default_rng(seed)
    starts += list(lo + rng.random((4, len(bounds))) * (hi - lo))
    starts = np.clip(np.array(starts), lo, hi)

    scores = np.array([_lml_and_grad(th, X, resid, noise, family, learn_noise)[0] for th in starts])
    order = np.argsort(scores, kind="stable")[:n_restarts]

    best_theta, best_val = None, np.inf
    for i in order:
        try:
            res = minimize(
                _lml_and_grad,
                starts[i],
                args=(X, resid, noise, family, learn_noise),
                jac=True,
                method="L-BFGS-B",
                bounds=bounds,
                options={"maxiter": 200},
            )
        except (ValueError, FloatingPointError):
            continue
        val, theta = (res.fun, res.x) if np.isfinite(res.fun) else (scores[i], starts[i])
        if val < best_val:
            best_val, best_theta = val, np.asarray(theta)
    if best_theta is None or best_val >= 1e24:
        warnings.warn("hyperparameter optimisation failed; using unit hyperparameters", RuntimeWarning)
        kernel = Kernel(family, 1.0, tuple(np.ones(d)))
        return HyperFit(kernel, 1e-6 if learn_noise else None, float("nan"), fell_back=True)

    kernel = Kernel(family, float(math.exp(best_theta[0])), tuple(np.exp(best_theta[1 : 1 + d])))
    noise_var = float(math.exp(best_theta[-1])) if learn_noise else None
    return HyperFit(kernel, noise_var, -float(best_val))


def fit_hyperparams(X, y, noise_diag=0.0, family: str = "matern52", seed: int = 0) -> Kernel:
    """Kernel hyperparameters maximising the marginal likelihood with a fixed noise diagonal."""
    return optimize_hyperparams(X, y, noise_diag, family=family, seed=seed).kernel


def log_marginal_likelihood(X, y, noise_diag, kernel: Kernel) -> float:
    return fit(X, y, noise_diag, kernel).log_likelihood
