"""Zero-mean GP fitting by profiled maximum likelihood and posterior prediction.

Predictive equations, with r(x0) the kernel vector against the training inputs
and R the correlation matrix with nugget:

    mean      mu0    = r(x0)^T R^-1 y
    variance  sigma0 = sigma^2 (1 + eta - r(x0)^T R^-1 r(x0))

The scale sigma^2 is profiled out of the marginal likelihood analytically
(sigma_hat^2 = y^T R^-1 y / N); lengthscales and nugget are optimized in log
space with deterministic multi-start.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve
from scipy.optimize import minimize

from .kernels import (
    CorrelationMatrix,
    KernelFamily,
    KernelSpec,
    build_correlation,
    cross_correlation,
)

NUGGET_FLOOR = 1e-8
_VARIANCE_CLAMP_TOL = 1e-10


class DegenerateDataError(ValueError):
    pass


class FitFailureError(RuntimeError):
    def __init__(self, msg, best_so_far=None):
        super().__init__(msg)
        self.best_so_far = best_so_far


@dataclass(frozen=True)
class GPHyperparams:
    kernel: KernelSpec
    scale: float  # sigma^2
    nugget: float  # eta

    def __post_init__(self):
        if not (self.scale > 0 and np.isfinite(self.scale)):
            raise ValueError("scale must be positive and finite")
        if not (self.nugget >= 0 and np.isfinite(self.nugget)):
            raise ValueError("nugget must be non-negative and finite")


@dataclass(frozen=True)
class FitConfig:
    """Hyperparameter-estimation settings, loadable from the CLI config file."""

    n_starts: int = 5
    seed: int = 0
    max_iter: int = 200
    # multipliers of the per-dimension input range for lengthscale bounds/inits
    lengthscale_range: tuple[float, float] = (0.01, 10.0)
    nugget_bounds: tuple[float, float] = (NUGGET_FLOOR, 1.0)
    family: KernelFamily = KernelFamily.SQUARED_EXPONENTIAL


@dataclass(frozen=True)
class TrainingSet:
    X: np.ndarray  # (N, D)
    y: np.ndarray  # (N,)

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        y = np.asarray(self.y, dtype=float).ravel()
        if X.shape[0] != y.shape[0]:
            raise ValueError("X and y must have matching first dimension")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("training data must be finite (complete cases only)")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]


@dataclass(frozen=True)
class PredictiveGaussian:
    mean: float
    variance: float


@dataclass(frozen=True)
class FittedGP:
    training: TrainingSet
    hyper: GPHyperparams
    corr: CorrelationMatrix
    alpha: np.ndarray  # R^-1 y, cached

    @property
    def n(self) -> int:
        return self.training.n


def make_fitted_gp(X, y, hyper: GPHyperparams) -> FittedGP:
    """Assemble a FittedGP from explicit hyperparameters (no estimation)."""
    training = TrainingSet(X, y)
    corr = build_correlation(hyper.kernel, hyper.nugget, training.X)
    alpha = corr.solve(training.y)
    return FittedGP(training=training, hyper=hyper, corr=corr, alpha=alpha)


def log_marginal_likelihood(X, y, hyper: GPHyperparams) -> float:
    """Zero-mean multivariate normal log density of y under sigma^2 R."""
    training = TrainingSet(X, y)
    corr = build_correlation(hyper.kernel, hyper.nugget, training.X)
    alpha = corr.solve(training.y)
    n = training.n
    quad = float(training.y @ alpha) / hyper.scale
    logdet = n * np.log(hyper.scale) + corr.logdet()
    return -0.5 * (n * np.log(2.0 * np.pi) + logdet + quad)


def _profiled_nll(theta: np.ndarray, X: np.ndarray, y: np.ndarray, family: KernelFamily):
    """Negative log ML with sigma^2 profiled out; theta = log lengthscales + [log nugget]."""
    ls = np.exp(theta[:-1])
    nugget = np.exp(theta[-1])
    try:
        corr = build_correlation(KernelSpec(family, ls), nugget, X)
    except np.linalg.LinAlgError:
        return np.inf
    alpha = corr.solve(y)
    quad = float(y @ alpha)
    n = len(y)
    if quad <= 0:
        return np.inf
    return 0.5 * n * np.log(quad / n) + 0.5 * corr.logdet()


class _PreparedSEObjective:
    """Profiled negative log ML for the SE kernel with analytic gradients in
    log space. Squared distances per dimension and the identical-row indicator
    are precomputed once per (X, y) pair."""

    def __init__(self, X: np.ndarray, y: np.ndarray):
        self.X = X
        self.y = y
        self.n = X.shape[0]
        self.d = X.shape[1]
        self.d2 = np.stack([(X[:, k, None] - X[None, :, k]) ** 2 for k in range(self.d)])
        self.same = np.all(X[:, None, :] == X[None, :, :], axis=2)
        self.eye = np.eye(self.n)

    def __call__(self, theta: np.ndarray):
        ls2 = np.exp(2.0 * theta[:-1])
        nugget = np.exp(theta[-1])
        K = np.exp(-np.tensordot(1.0 / ls2, self.d2, axes=1))
        R = K + nugget * self.same
        try:
            L, jitter = _cholesky_with_jitter_fast(R, self.eye)
        except np.linalg.LinAlgError:
            return np.inf, np.zeros_like(theta)
        alpha = cho_solve((L, True), self.y, check_finite=False)
        quad = float(self.y @ alpha)
        if quad <= 0:
            return np.inf, np.zeros_like(theta)
        nll = 0.5 * self.n * np.log(quad / self.n) + float(np.sum(np.log(np.diag(L))))
        Rinv = cho_solve((L, True), self.eye, check_finite=False)
        grad = np.empty_like(theta)
        for k in range(self.d):
            dR = K * (2.0 * self.d2[k] / ls2[k])
            grad[k] = 0.5 * (
                -self.n * float(alpha @ dR @ alpha) / quad + float(np.sum(Rinv * dR))
            )
        dRn = nugget * self.same
        grad[-1] = 0.5 * (
            -self.n * float(alpha @ dRn @ alpha) / quad + float(np.sum(Rinv * dRn))
        )
        return nll, grad


def _cholesky_with_jitter_fast(R: np.ndarray, eye: np.ndarray):
    jitter = 0.0
    while True:
        try:
            return np.linalg.cholesky(R if jitter == 0.0 else R + jitter * eye), jitter
        except np.linalg.LinAlgError:
            jitter = 1e-10 if jitter == 0.0 else jitter * 10.0
            if jitter > 1e-4:
                raise


def _minimize_nll(X, y, theta0, bounds, family: KernelFamily, max_iter: int):
    if family is KernelFamily.SQUARED_EXPONENTIAL:
        obj = _PreparedSEObjective(X, y)
        return minimize(obj, theta0, jac=True, method="L-BFGS-B", bounds=bounds,
                        options={"maxiter": max_iter})
    return minimize(_profiled_nll, theta0, args=(X, y, family), method="L-BFGS-B",
                    bounds=bounds, options={"maxiter": max_iter})


def fit_gp(X, y, config: FitConfig = FitConfig()) -> FittedGP:
    """Estimate lengthscales and nugget by multi-start profiled ML.

    Deterministic given ``config.seed``: starts are drawn from a seeded RNG and
    the best objective wins, ties broken by lowest start index.
    """
    training = TrainingSet(X, y)
    if training.n < 2:
        raise ValueError("fitting requires at least 2 data points")
    if np.ptp(training.y) == 0:
        raise DegenerateDataError("all outputs identical; cannot fit a GP scale")

    X_, y_ = training.X, training.y
    ranges = np.ptp(X_, axis=0)
    ranges = np.where(ranges > 0, ranges, 1.0)
    lo = np.log(config.lengthscale_range[0] * ranges)
    hi = np.log(config.lengthscale_range[1] * ranges)
    nlo, nhi = np.log(config.nugget_bounds[0]), np.log(config.nugget_bounds[1])
    bounds = [(a, b) for a, b in zip(lo, hi)] + [(nlo, nhi)]

    rng = np.random.default_rng(config.seed)
    starts = []
    for _ in range(max(1, config.n_starts)):
        t = np.concatenate(
            [rng.uniform(lo, hi), [rng.uniform(nlo, max(nlo, np.log(1e-1)))]]
        )
        starts.append(t)

    best = None
    best_val = np.inf
    for t0 in starts:
        res = _minimize_nll(X_, y_, t0, bounds, config.family, config.max_iter)
        if np.isfinite(res.fun) and res.fun < best_val:
            best_val = res.fun
            best = res.x
    if best is None:
        raise FitFailureError("optimizer produced no finite objective value")

    ls = np.exp(best[:-1])
    nugget = float(np.exp(best[-1]))
    spec = KernelSpec(config.family, ls)
    corr = build_correlation(spec, nugget, X_)
    alpha = corr.solve(y_)
    scale = float(y_ @ alpha) / training.n
    hyper = GPHyperparams(kernel=spec, scale=scale, nugget=nugget)
    return FittedGP(training=training, hyper=hyper, corr=corr, alpha=alpha)


def refit_gp(model_X, model_y, init: GPHyperparams, max_iter: int = 50) -> FittedGP:
    """Single warm-started local refit; used inside iterative training loops."""
    training = TrainingSet(model_X, model_y)
    t0 = np.concatenate([np.log(init.kernel.lengthscales), [np.log(max(init.nugget, NUGGET_FLOOR))]])
    ranges = np.ptp(training.X, axis=0)
    ranges = np.where(ranges > 0, ranges, 1.0)
    lo = np.log(0.01 * ranges)
    hi = np.log(10.0 * ranges)
    bounds = [(a, b) for a, b in zip(lo, hi)] + [(np.log(NUGGET_FLOOR), 0.0)]
    t0 = np.clip(t0, [b[0] for b in bounds], [b[1] for b in bounds])
    res = _minimize_nll(training.X, training.y, t0, bounds, init.kernel.family, max_iter)
    theta = res.x if np.isfinite(res.fun) else t0
    spec = KernelSpec(init.kernel.family, np.exp(theta[:-1]))
    nugget = float(np.exp(theta[-1]))
    corr = build_correlation(spec, nugget, training.X)
    alpha = corr.solve(training.y)
    scale = float(training.y @ alpha) / training.n
    return FittedGP(
        training=training,
        hyper=GPHyperparams(kernel=spec, scale=scale, nugget=nugget),
        corr=corr,
        alpha=alpha,
    )


def _clamp_variance(var: np.ndarray) -> np.ndarray:
    bad = var < -_VARIANCE_CLAMP_TOL
    if np.any(bad):
        warnings.warn(
            f"clamped {int(np.sum(bad))} predictive variance(s) below -{_VARIANCE_CLAMP_TOL:g}",
            RuntimeWarning,
            stacklevel=3,
        )
    return np.maximum(var, 0.0)


def predict_batch(model: FittedGP, X0) -> tuple[np.ndarray, np.ndarray]:
    """Posterior predictive mean and variance at each row of X0."""
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    r = cross_correlation(model.hyper.kernel, X0, model.training.X)  # (M, N)
    mean = r @ model.alpha
    Rinv_r = cho_solve((model.corr.chol, True), r.T, check_finite=False)  # (N, M)
    var = model.hyper.scale * (
        1.0 + model.hyper.nugget - np.sum(r * Rinv_r.T, axis=1)
    )
    return mean, _clamp_variance(var)


def predict(model: FittedGP, x0) -> PredictiveGaussian:
    """Posterior predictive distribution at a single input."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    mean, var = predict_batch(model, x0[None, :])
    return PredictiveGaussian(mean=float(mean[0]), variance=float(var[0]))


def with_hyperparams(model: FittedGP, hyper: GPHyperparams) -> FittedGP:
    """Rebuild a FittedGP on the same data with different hyperparameters."""
    return make_fitted_gp(model.training.X, model.training.y, hyper)
