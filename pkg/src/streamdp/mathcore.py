"""Numerical kernels: digamma, Cholesky factors, log-sum-exp, Wishart normalizer.

Everything here works in float64 and is a pure function of its inputs.
"""
import numpy as np
from scipy.linalg import lapack, solve_triangular
from scipy.special import gammaln

from .errors import DomainError, NotPositiveDefinite, ShapeError

LOG_2PI = np.log(2.0 * np.pi)

# B_{2k} / (2k) for k = 1..8
_DIGAMMA_SERIES = np.array([
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
    -3617.0 / 8160.0,
])
_DIGAMMA_SHIFT = 6.0


def digamma(x):
    """Digamma function for positive arguments.

    Shifts every argument up to at least 6 with psi(x) = psi(x + 1) - 1/x
    and then evaluates the 8-term asymptotic expansion.  Accepts scalars
    or arrays; a scalar input returns a Python float.
    """
    scalar = np.ndim(x) == 0
    x = np.array(x, dtype=np.float64, copy=True)
    if not np.all(np.isfinite(x)) or np.any(x <= 0):
        raise DomainError("digamma requires finite positive arguments")
    shift = np.zeros_like(x)
    low = x < _DIGAMMA_SHIFT
    while np.any(low):
        shift[low] -= 1.0 / x[low]
        x[low] += 1.0
        low = x < _DIGAMMA_SHIFT
    inv2 = 1.0 / (x * x)
    series = np.zeros_like(x)
    for c in _DIGAMMA_SERIES[::-1]:
        series = (series + c) * inv2
    out = np.log(x) - 0.5 / x - series + shift
    return float(out) if scalar else out


class CholeskyFactor:
    """Lower-triangular factor ``L`` with ``A = L @ L.T``."""

    __slots__ = ("lower", "dim")

    def __init__(self, lower):
        lower = np.asarray(lower, dtype=np.float64)
        if lower.ndim != 2 or lower.shape[0] != lower.shape[1]:
            raise ShapeError(f"Cholesky factor must be square, got {lower.shape}")
        self.lower = lower
        self.dim = lower.shape[0]

    def logdet(self):
        return 2.0 * float(np.sum(np.log(np.diag(self.lower))))

    def reconstruct(self):
        return self.lower @ self.lower.T

    def half_solve(self, b):
        """Return ``L^{-1} b``."""
        return solve_triangular(self.lower, b, lower=True, check_finite=False)

    def solve(self, b):
        """Return ``A^{-1} b``."""
        y = solve_triangular(self.lower, b, lower=True, check_finite=False)
        return solve_triangular(self.lower.T, y, lower=False, check_finite=False)

    def inverse(self):
        return self.solve(np.eye(self.dim))

    def quad_inv(self, v):
        """Row-wise ``v_n^T A^{-1} v_n`` for ``v`` of shape (n, dim) or (dim,)."""
        v = np.asarray(v, dtype=np.float64)
        y = self.half_solve(v.T if v.ndim == 2 else v)
        return np.sum(y * y, axis=0)

    def trace_inv(self, b):
        """``Tr(A^{-1} B)`` for a square ``B``."""
        y = self.half_solve(b)
        return float(np.trace(self.half_solve(y.T)))

    def __eq__(self, other):
        return isinstance(other, CholeskyFactor) and np.array_equal(self.lower, other.lower)

    def __repr__(self):
        return f"CholeskyFactor(dim={self.dim})"


def cholesky(a, sym_tol=1e-9):
    """Factor a symmetric positive-definite matrix.

    Raises NotPositiveDefinite with the zero-based failing pivot.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"cholesky needs a square matrix, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise DomainError("cholesky input has non-finite entries")
    scale = max(float(np.max(np.abs(a))), 1e-300) if a.size else 1.0
    if a.size and np.max(np.abs(a - a.T)) > sym_tol * scale:
        raise DomainError("cholesky input is not symmetric")
    if a.shape[0] == 0:
        return CholeskyFactor(np.zeros((0, 0)))
    c, info = lapack.dpotrf(a, lower=1, clean=1)
    if info > 0:
        raise NotPositiveDefinite(info - 1)
    if info < 0:
        raise DomainError(f"dpotrf rejected argument {-info}")
    return CholeskyFactor(c)


def log_sum_exp(v, axis=None):
    """Overflow-free ``log(sum(exp(v)))`` using the max-shift scheme."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0 or (axis is not None and v.shape[axis] == 0):
        raise DomainError("log_sum_exp of an empty vector")
    vmax = np.max(v, axis=axis, keepdims=True)
    vmax = np.where(np.isfinite(vmax), vmax, 0.0)
    out = np.log(np.sum(np.exp(v - vmax), axis=axis, keepdims=True)) + vmax
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def log_wishart_normalizer_from_logdet(logdet_w, dim, nu):
    """``log B(W, nu)`` given ``log|W|``."""
    if not nu > dim - 1:
        raise DomainError(f"Wishart degrees of freedom {nu} must exceed dim - 1 = {dim - 1}")
    i = np.arange(1, dim + 1)
    return (-0.5 * nu * logdet_w
            - 0.5 * nu * dim * np.log(2.0)
            - 0.25 * dim * (dim - 1) * np.log(np.pi)
            - float(np.sum(gammaln(0.5 * (nu + 1 - i)))))


def log_wishart_normalizer(w, nu):
    """Log of the Wishart normalizing constant B(W, nu)."""
    w = np.atleast_2d(np.asarray(w, dtype=np.float64))
    if not np.all(np.isfinite(w)):
        raise DomainError("Wishart scale matrix has non-finite entries")
    dim = w.shape[0]
    if not nu > dim - 1:
        raise DomainError(f"Wishart degrees of freedom {nu} must exceed dim - 1 = {dim - 1}")
    return log_wishart_normalizer_from_logdet(cholesky(w).logdet(), dim, nu)


def expected_logdet_wishart(logdet_w, dim, nu):
    """``E[log|Lambda|]`` for ``Lambda ~ Wishart(W, nu)``."""
    i = np.arange(1, dim + 1)
    return float(np.sum(digamma(0.5 * (nu + 1 - i)))) + dim * np.log(2.0) + logdet_w
