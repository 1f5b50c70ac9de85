"""
Pareto-smoothed importance sampling.

The largest importance ratios are replaced by expected order statistics of a
generalized Pareto distribution fitted to the tail, which stabilizes weighted
estimates when the ratios are heavy-tailed. The fitted shape k-hat doubles as a
reliability diagnostic.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import logsumexp

logger = logging.getLogger(__name__)

# Below this many draws no tail fit is attempted.
MIN_DRAWS_FOR_SMOOTHING = 25
# The generalized Pareto fit needs at least this many tail points.
MIN_TAIL = 5
# Zhang-Stephens: base number of quadrature points over the transformed shape;
# sqrt(n) more are added for a tail of length n.
GRID_POINTS = 30
# Weakly informative prior pulling k-hat towards 0.5 with this many pseudo-points.
PRIOR_K_COUNT = 10
PRIOR_K_VALUE = 0.5


class PSISError(Exception):
    """Exception raised when importance ratios cannot be smoothed."""

    def __init__(self, message: str) -> None:
        self.message = message
        super().__init__(self.message)


class Regime(Enum):
    """Convergence regime implied by the Pareto shape k-hat."""

    FAST_CONVERGENCE = "fast_convergence"
    SLOW_CONVERGENCE = "slow_convergence"
    UNRELIABLE = "unreliable"

    @classmethod
    def from_k_hat(cls, k_hat: float) -> Regime:
        """Classify k-hat: below 1/2, in [1/2, 1), or 1 and above (or unknown)."""
        if math.isnan(k_hat) or k_hat >= 1.0:
            return cls.UNRELIABLE
        if k_hat >= 0.5:
            return cls.SLOW_CONVERGENCE
        return cls.FAST_CONVERGENCE


@dataclass(frozen=True)
class ImportanceRatios:
    """
    Log importance ratios for S draws.

    components, when present, is an (S, 3) array of the log factors whose sum
    is log_ratios.
    """

    log_ratios: NDArray[np.float64]
    components: Optional[NDArray[np.float64]] = None

    def __post_init__(self) -> None:
        log_ratios = np.asarray(self.log_ratios, dtype=float)
        if log_ratios.ndim != 1 or log_ratios.size < 2:
            raise PSISError("at least two log ratios are required")
        bad = np.flatnonzero(~np.isfinite(log_ratios))
        if bad.size:
            raise PSISError(f"non-finite log ratio at draw {int(bad[0])}")
        object.__setattr__(self, "log_ratios", log_ratios)

    @property
    def size(self) -> int:
        """Number of draws."""
        return int(self.log_ratios.size)


@dataclass(frozen=True)
class SmoothedWeights:
    """Normalized smoothed weights with the fitted tail shape."""

    weights: NDArray[np.float64]
    k_hat: float
    regime: Regime


def fit_generalized_pareto(tail_sample: ArrayLike) -> tuple[float, float]:
    """
    Estimate shape k and scale sigma of a generalized Pareto distribution with
    location zero.

    Uses the Zhang-Stephens profile posterior: a grid over the transformed
    parameter b = -k/sigma, weighted by profile likelihood, with the posterior
    mean of b mapped back to (k, sigma). The shape estimate is shrunk slightly
    towards 0.5.
    """
    x = np.sort(np.asarray(tail_sample, dtype=float))
    n = x.size
    if n < MIN_TAIL:
        raise PSISError(
            f"tail of length {n} is too short for a Pareto fit; skip smoothing"
        )
    if x[0] < 0 or not np.all(np.isfinite(x)):
        raise PSISError("tail sample must be finite and nonnegative")
    if x[-1] == x[0]:
        raise PSISError("tail sample is constant; no tail shape can be fitted")

    quartile = x[int(n / 4 + 0.5) - 1]
    if quartile <= 0:
        # Ties at the threshold; scale the grid by the smallest exceedance.
        quartile = x[x > 0][0]
    m = GRID_POINTS + int(math.sqrt(n))
    b = 1.0 - np.sqrt(m / (np.arange(1, m + 1, dtype=float) - 0.5))
    b = b / (3.0 * quartile) + 1.0 / x[-1]
    k = np.log1p(-b[:, None] * x).mean(axis=1)
    profile = n * (np.log(-(b / k)) - k - 1.0)
    weights = 1.0 / np.exp(profile - profile[:, None]).sum(axis=1)
    keep = weights >= 10 * np.finfo(float).eps
    weights, b = weights[keep], b[keep]
    weights = weights / weights.sum()

    b_post = float(np.sum(b * weights))
    k_post = float(np.log1p(-b_post * x).mean())
    sigma = -k_post / b_post
    k_post = (n * k_post + PRIOR_K_COUNT * PRIOR_K_VALUE) / (n + PRIOR_K_COUNT)
    return k_post, sigma


def _gpd_quantile(p: NDArray[np.float64], k: float, sigma: float) -> NDArray:
    if abs(k) < 1e-12:
        return -sigma * np.log1p(-p)
    return sigma * np.expm1(-k * np.log1p(-p)) / k


def tail_length(n_draws: int) -> int:
    """M = ceil(min(0.2 S, 3 sqrt(S)))."""
    return int(math.ceil(min(0.2 * n_draws, 3.0 * math.sqrt(n_draws))))


def pareto_smooth(ratios: ImportanceRatios) -> SmoothedWeights:
    """
    Smooth and normalize importance ratios.

    The M largest ratios are replaced by the expected order statistics of the
    generalized Pareto fitted to their exceedances over the largest remaining
    ratio, capped at the largest raw ratio. With fewer than
    MIN_DRAWS_FOR_SMOOTHING draws the raw ratios are only normalized and k-hat
    is NaN. When all ratios are equal the weights are uniform and k-hat is -inf.
    """
    log_w = ratios.log_ratios - np.max(ratios.log_ratios)
    n = log_w.size

    if n < MIN_DRAWS_FOR_SMOOTHING:
        weights = np.exp(log_w - logsumexp(log_w))
        return SmoothedWeights(weights, math.nan, Regime.UNRELIABLE)
    if np.all(log_w == 0.0):
        return SmoothedWeights(
            np.full(n, 1.0 / n), -math.inf, Regime.FAST_CONVERGENCE
        )

    m = tail_length(n)
    order = np.argsort(log_w, kind="stable")
    tail_idx = order[-m:]
    cutoff = log_w[order[-m - 1]]

    k_hat = -math.inf
    try:
        k_hat, sigma = fit_generalized_pareto(np.exp(log_w[tail_idx]) - np.exp(cutoff))
    except PSISError as exc:
        # Only a tail tied with the cutoff gets here; its ratios are bounded.
        logger.debug("Pareto fit skipped: %s", exc.message)
    else:
        # tail_idx is ascending in log_w, so quantiles line up with ranks.
        p = (np.arange(m) + 0.5) / m
        smoothed = _gpd_quantile(p, k_hat, sigma) + np.exp(cutoff)
        log_w = log_w.copy()
        log_w[tail_idx] = np.minimum(np.log(smoothed), 0.0)

    weights = np.exp(log_w - logsumexp(log_w))
    return SmoothedWeights(weights, float(k_hat), Regime.from_k_hat(k_hat))


def efficiency(ratios: ArrayLike) -> float:
    """S / Σ(r_s / r̄)²; equals 1 for equal ratios and tends to 1/S under collapse."""
    r = np.asarray(ratios, dtype=float)
    if r.size == 0 or np.any(r < 0) or not np.any(r > 0):
        raise PSISError("efficiency needs nonnegative ratios with at least one positive")
    rel = r / r.mean()
    return float(r.size / np.sum(rel**2))


def log_efficiency_ratios(log_ratios: ArrayLike) -> float:
    """efficiency() evaluated from log ratios without overflow."""
    lr = np.asarray(log_ratios, dtype=float)
    return efficiency(np.exp(lr - lr.max()))


def importance_resample(
    samples: ArrayLike, weights: ArrayLike, n: int, rng: np.random.Generator
) -> NDArray[np.float64]:
    """Draw n rows of samples with replacement, proportionally to weights."""
    samples = np.asarray(samples, dtype=float)
    w = np.asarray(weights, dtype=float)
    idx = rng.choice(samples.shape[0], size=n, replace=True, p=w / w.sum())
    return samples[idx]
