"""Stationary product kernels, correlation matrices, and Gaussian kernel expectations.

Squared-exponential convention used throughout this package:

    k(r) = exp(-r^2 / l^2)

i.e. no factor of 2 in the denominator. The closed-form expectations in
:func:`expect_k` and :func:`expect_kk` are derived for this convention and are
validated against Gauss-Hermite quadrature and Monte Carlo in the test suite.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

JITTER_START = 1e-10
JITTER_MAX = 1e-4


class KernelFamily(enum.Enum):
    SQUARED_EXPONENTIAL = "squared_exponential"
    MATERN_2_5 = "matern_2_5"


class DimensionMismatchError(ValueError):
    pass


class SingularMatrixError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class KernelSpec:
    """Product-form stationary correlation kernel with per-dimension lengthscales."""

    family: KernelFamily
    lengthscales: np.ndarray  # shape (D,), strictly positive

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        if ls.ndim != 1:
            raise ValueError("lengthscales must be a 1-D array")
        if not np.all(np.isfinite(ls)) or np.any(ls <= 0):
            raise ValueError("lengthscales must be strictly positive and finite")
        object.__setattr__(self, "lengthscales", ls)

    @property
    def ndim(self) -> int:
        return self.lengthscales.shape[0]


def _kernel_1d(family: KernelFamily, r: np.ndarray, lengthscale: float) -> np.ndarray:
    r = np.abs(r)
    if family is KernelFamily.SQUARED_EXPONENTIAL:
        return np.exp(-(r / lengthscale) ** 2)
    if family is KernelFamily.MATERN_2_5:
        z = np.sqrt(5.0) * r / lengthscale
        return (1.0 + z + z**2 / 3.0) * np.exp(-z)
    raise NotImplementedError(f"unsupported kernel family: {family}")


def kernel_value(spec: KernelSpec, a, b) -> float:
    """Product over dimensions of the 1-D kernel at |a_d - b_d|."""
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if a.shape != (spec.ndim,) or b.shape != (spec.ndim,):
        raise DimensionMismatchError(
            f"expected {spec.ndim}-vectors, got shapes {a.shape} and {b.shape}"
        )
    vals = _kernel_1d(spec.family, a - b, spec.lengthscales)
    return float(np.prod(vals))


def cross_correlation(spec: KernelSpec, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Kernel matrix k(A_i, B_j), shape (len(A), len(B))."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape[1] != spec.ndim or B.shape[1] != spec.ndim:
        raise DimensionMismatchError(
            f"expected {spec.ndim} columns, got {A.shape[1]} and {B.shape[1]}"
        )
    out = np.ones((A.shape[0], B.shape[0]))
    for d in range(spec.ndim):
        diff = A[:, d, None] - B[None, :, d]
        out *= _kernel_1d(spec.family, diff, spec.lengthscales[d])
    return out


@dataclass
class CorrelationMatrix:
    """Symmetric correlation matrix with nugget and a cached Cholesky factor.

    ``values`` holds the un-jittered matrix; the factor is of
    ``values + jitter_applied * I``.
    """

    values: np.ndarray
    chol: np.ndarray = field(repr=False)
    jitter_applied: float = 0.0

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def solve(self, b: np.ndarray) -> np.ndarray:
        from scipy.linalg import cho_solve

        return cho_solve((self.chol, True), b, check_finite=False)

    def inverse(self) -> np.ndarray:
        return self.solve(np.eye(self.n))

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.chol))))


def _cholesky_with_jitter(R: np.ndarray) -> tuple[np.ndarray, float]:
    jitter = 0.0
    while True:
        try:
            L = np.linalg.cholesky(R if jitter == 0.0 else R + jitter * np.eye(len(R)))
            return L, jitter
        except np.linalg.LinAlgError:
            jitter = JITTER_START if jitter == 0.0 else jitter * 10.0
            if jitter > JITTER_MAX:
                raise SingularMatrixError(
                    f"correlation matrix not positive definite even at jitter {JITTER_MAX:g}"
                ) from None


def build_correlation(spec: KernelSpec, nugget: float, X: np.ndarray) -> CorrelationMatrix:
    """Correlation matrix k(X_i, X_j) + nugget * 1{X_i = X_j} with factorization.

    The nugget follows the indicator form: it is added for every pair of
    identical rows, not just the diagonal.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if nugget < 0 or not np.isfinite(nugget):
        raise ValueError("nugget must be finite and non-negative")
    K = cross_correlation(spec, X, X)
    # indicator-form nugget: added for every identical-row pair, not just i == j
    if np.unique(X, axis=0).shape[0] == X.shape[0]:
        R = K + nugget * np.eye(X.shape[0])
    else:
        same = np.all(X[:, None, :] == X[None, :, :], axis=2)
        R = K + nugget * same
    R = 0.5 * (R + R.T)
    L, jitter = _cholesky_with_jitter(R)
    return CorrelationMatrix(values=R, chol=L, jitter_applied=jitter)


def _require_se(spec: KernelSpec):
    if spec.family is not KernelFamily.SQUARED_EXPONENTIAL:
        raise NotImplementedError(
            f"closed-form kernel expectations only available for the squared "
            f"exponential family, not {spec.family}"
        )


def expect_k(spec: KernelSpec, m, v, w) -> np.ndarray | float:
    """E[k(W, w)] for W ~ Normal(m, diag(v)), product over dimensions.

    For the SE convention k(r) = exp(-r^2/l^2):

        E[k_d] = (1 + 2 v_d / l_d^2)^(-1/2) * exp(-(m_d - w_d)^2 / (l_d^2 + 2 v_d))

    ``m`` and ``v`` have shape (D,); ``w`` may be (D,) or (N, D), in which case
    an (N,) vector is returned.
    """
    _require_se(spec)
    m = np.atleast_1d(np.asarray(m, dtype=float))
    v = np.atleast_1d(np.asarray(v, dtype=float))
    if np.any(v < 0):
        raise ValueError("variance must be non-negative")
    w = np.asarray(w, dtype=float)
    scalar = w.ndim <= 1
    w2 = np.atleast_2d(w)
    l2 = spec.lengthscales**2
    denom = l2 + 2.0 * v
    pref = np.sqrt(l2 / denom)
    vals = pref * np.exp(-((m - w2) ** 2) / denom)
    out = np.prod(vals, axis=1)
    return float(out[0]) if scalar else out


def expect_kk_pairwise(spec: KernelSpec, m, v, W: np.ndarray) -> np.ndarray:
    """All-pairs version of :func:`expect_kk`: entry (i, j) is E[k(W0, W_i) k(W0, W_j)].

    ``W`` has shape (N, D); returns an (N, N) symmetric matrix.
    """
    _require_se(spec)
    m = np.atleast_1d(np.asarray(m, dtype=float))
    v = np.atleast_1d(np.asarray(v, dtype=float))
    if np.any(v < 0):
        raise ValueError("variance must be non-negative")
    W = np.atleast_2d(np.asarray(W, dtype=float))
    l2 = spec.lengthscales**2
    out = np.ones((W.shape[0], W.shape[0]))
    for d in range(W.shape[1]):
        wi = W[:, d, None]
        wj = W[None, :, d]
        wbar = 0.5 * (wi + wj)
        denom = l2[d] + 4.0 * v[d]
        out *= (
            np.exp(-((wi - wj) ** 2) / (2.0 * l2[d]))
            * np.sqrt(l2[d] / denom)
            * np.exp(-2.0 * (m[d] - wbar) ** 2 / denom)
        )
    return out


def expect_kk(spec: KernelSpec, m, v, w_i, w_j) -> np.ndarray | float:
    """E[k(W, w_i) k(W, w_j)] for W ~ Normal(m, diag(v)), product over dimensions.

    For the SE convention, with wbar = (w_i + w_j)/2:

        E[k_d k_d] = exp(-(w_i - w_j)^2 / (2 l^2))
                     * (1 + 4 v / l^2)^(-1/2)
                     * exp(-2 (m - wbar)^2 / (l^2 + 4 v))

    ``w_i`` / ``w_j`` may be (D,) or (N, D); shapes must broadcast.
    """
    _require_se(spec)
    m = np.atleast_1d(np.asarray(m, dtype=float))
    v = np.atleast_1d(np.asarray(v, dtype=float))
    if np.any(v < 0):
        raise ValueError("variance must be non-negative")
    wi = np.asarray(w_i, dtype=float)
    wj = np.asarray(w_j, dtype=float)
    scalar = wi.ndim <= 1 and wj.ndim <= 1
    wi2 = np.atleast_2d(wi)
    wj2 = np.atleast_2d(wj)
    l2 = spec.lengthscales**2
    wbar = 0.5 * (wi2 + wj2)
    denom = l2 + 4.0 * v
    pref = np.sqrt(l2 / denom)
    vals = (
        np.exp(-((wi2 - wj2) ** 2) / (2.0 * l2))
        * pref
        * np.exp(-2.0 * (m - wbar) ** 2 / denom)
    )
    out = np.prod(vals, axis=1)
    return float(out[0]) if scalar else out
