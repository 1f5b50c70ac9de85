"""
Dense Gaussian helpers shared by the rest of the package: the GaussianApprox
value type, Cholesky-based log densities, weighted moments and
positive-definiteness checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import linalg

# Symmetry tolerance for covariance matrices.
SYMMETRY_TOL = 1e-10
# A Cholesky pivot must exceed this fraction of the largest diagonal entry.
PIVOT_TOL = 1e-12
# Diagonal jitter, relative to the mean diagonal, used by regularize().
JITTER = 1e-8


class GaussianError(Exception):
    """Exception raised for invalid Gaussian inputs."""

    def __init__(self, message: str) -> None:
        self.message = message
        super().__init__(self.message)


class WeightCollapseError(GaussianError):
    """Raised when fewer than two draws carry positive weight."""


def symmetrize(m: ArrayLike) -> NDArray[np.float64]:
    """Average a square matrix with its transpose."""
    m = np.asarray(m, dtype=float)
    return 0.5 * (m + m.T)


def _check_square(m: NDArray[np.float64], label: str) -> None:
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise GaussianError(f"{label} must be square, got shape {m.shape}")


def cholesky(m: ArrayLike, label: str = "covariance") -> NDArray[np.float64]:
    """
    Return the lower Cholesky factor of a symmetric matrix.

    The matrix is symmetrized first. A factorization whose smallest pivot is
    not above PIVOT_TOL times the largest diagonal entry is rejected, so
    numerically singular matrices fail here rather than producing huge
    densities downstream.
    """
    m = np.asarray(m, dtype=float)
    _check_square(m, label)
    m = symmetrize(m)
    try:
        chol = linalg.cholesky(m, lower=True)
    except linalg.LinAlgError as exc:
        raise GaussianError(f"{label} is not positive definite") from exc
    pivots = np.diag(chol) ** 2
    if pivots.size and pivots.min() <= PIVOT_TOL * np.max(np.abs(np.diag(m))):
        raise GaussianError(f"{label} is not positive definite")
    return chol


def is_positive_definite(m: ArrayLike) -> bool:
    """Return True iff the Cholesky factorization of m succeeds."""
    m = np.asarray(m, dtype=float)
    _check_square(m, "matrix")
    try:
        cholesky(m)
    except GaussianError:
        return False
    return True


def regularize(m: ArrayLike, scale: float = JITTER) -> NDArray[np.float64]:
    """Symmetrize and add scale times the mean diagonal to the diagonal."""
    m = symmetrize(m)
    _check_square(m, "matrix")
    return m + scale * np.mean(np.diag(m)) * np.eye(m.shape[0])


@dataclass(frozen=True)
class GaussianApprox:
    """A multivariate normal N(mean, cov) on the unconstrained scale."""

    mean: NDArray[np.float64]
    cov: NDArray[np.float64]

    def __post_init__(self) -> None:
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if mean.ndim != 1:
            raise GaussianError(f"mean must be a vector, got shape {mean.shape}")
        if cov.shape != (mean.size, mean.size):
            raise GaussianError(
                f"mean of length {mean.size} does not match cov of shape {cov.shape}"
            )
        if not np.allclose(cov, cov.T, rtol=0.0, atol=SYMMETRY_TOL):
            raise GaussianError("cov is not symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", symmetrize(cov))

    @property
    def dim(self) -> int:
        """Dimension of the distribution."""
        return int(self.mean.size)

    @classmethod
    def standard(cls, mean: ArrayLike) -> GaussianApprox:
        """N(mean, I)."""
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        return cls(mean, np.eye(mean.size))

    def precision(self) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        """Return the natural parameters (Σ⁻¹, Σ⁻¹μ)."""
        chol = cholesky(self.cov)
        prec = linalg.cho_solve((chol, True), np.eye(self.dim))
        return symmetrize(prec), linalg.cho_solve((chol, True), self.mean)

    def sample(self, n: int, rng: np.random.Generator) -> NDArray[np.float64]:
        """Draw n samples as an (n, dim) array."""
        chol = cholesky(self.cov)
        z = rng.standard_normal((n, self.dim))
        return self.mean + z @ chol.T


def mvn_logpdf(x: ArrayLike, g: GaussianApprox) -> float | NDArray[np.float64]:
    """
    Log density of N(g.mean, g.cov) at x.

    x may be a single point of shape (d,) or a stack of points of shape
    (n, d); the result is a float or an (n,) array respectively.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (g.dim,):
        raise GaussianError(
            f"point of dimension {x.shape[-1:]} does not match distribution "
            f"of dimension {g.dim}"
        )
    chol = cholesky(g.cov)
    resid = (x - g.mean).reshape(-1, g.dim)
    z = linalg.solve_triangular(chol, resid.T, lower=True)
    log_det = 2.0 * np.sum(np.log(np.diag(chol)))
    logp = -0.5 * (np.sum(z**2, axis=0) + log_det + g.dim * np.log(2.0 * np.pi))
    if x.ndim == 1:
        return float(logp[0])
    return logp


def weighted_moments(samples: ArrayLike, weights: ArrayLike) -> GaussianApprox:
    """
    Weighted mean and covariance of the rows of samples.

    The covariance uses the population form with denominator Σw, so equal
    weights give the ordinary mean and the ddof=0 covariance. Weights need not
    be normalized.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (samples.shape[0],):
        raise GaussianError(
            f"{weights.size} weights given for {samples.shape[0]} samples"
        )
    if np.any(weights < 0) or not np.all(np.isfinite(weights)):
        raise GaussianError("weights must be finite and nonnegative")
    if np.count_nonzero(weights) < 2:
        raise WeightCollapseError(
            "fewer than two draws carry positive weight; the weights have collapsed"
        )
    w = weights / weights.sum()
    mean = w @ samples
    resid = samples - mean
    cov = (resid * w[:, None]).T @ resid
    return GaussianApprox(mean, symmetrize(cov))
