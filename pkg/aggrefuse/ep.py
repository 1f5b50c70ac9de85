"""
Pseudo-prior state and the expectation-propagation style updates.

g(δ) is refreshed by moment matching the weighted δ draws. g(φ) is refreshed
with the Gaussian cavity p0 p2 / p1: the pseudo-prior p0, times the weighted
posterior p2, divided by the unweighted pseudo-posterior p1. What remains is
the information about φ that does not come from the local data likelihood.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np
from numpy.typing import ArrayLike, NDArray

from aggrefuse.gaussian import (
    GaussianApprox,
    GaussianError,
    is_positive_definite,
    mvn_logpdf,
    regularize,
    symmetrize,
    weighted_moments,
)
from aggrefuse.model import ModelSpec
from aggrefuse.psis import ImportanceRatios, SmoothedWeights

logger = logging.getLogger(__name__)

# Give up halving the cavity step after this many halvings.
MAX_HALVINGS = 60

FACTOR_NAMES = ("r1", "r2", "r3")


class EPError(Exception):
    """Exception raised for invalid pseudo-prior updates."""

    def __init__(self, message: str) -> None:
        self.message = message
        super().__init__(self.message)


class Relaxation(Enum):
    """How the cavity update is damped when its precision is not PD."""

    # Σ0⁻¹ + Σ2⁻¹ − 2⁻ⁿ Σ1⁻¹
    DAMPED = "damped"
    # Σ0⁻¹ + Σ2⁻¹ − 2⁻ⁿ Σ2⁻¹
    PAPER_LITERAL = "paper_literal"


@dataclass(frozen=True)
class PseudoPriorPair:
    """Independent Gaussian pseudo-priors g(φ) and g(δ)."""

    g_phi: GaussianApprox
    g_delta: GaussianApprox


def importance_log_ratios(
    phi_draws: ArrayLike,
    delta_draws: ArrayLike,
    pseudo: PseudoPriorPair,
    model: ModelSpec,
    log_r3: ArrayLike,
) -> ImportanceRatios:
    """
    log r = log r(1) + log r(2) + log r(3) per draw, where
    r(1) = p(φ)/g(φ), r(2) = p(δ|φ)/g(δ), and r(3) is the average-data
    likelihood.
    """
    phi_draws = np.atleast_2d(np.asarray(phi_draws, dtype=float))
    delta_draws = np.asarray(delta_draws, dtype=float).reshape(phi_draws.shape[0], pseudo.g_delta.dim)
    log_r3 = np.asarray(log_r3, dtype=float)
    if log_r3.shape != (phi_draws.shape[0],):
        raise EPError(f"{log_r3.size} values of log r3 given for {phi_draws.shape[0]} draws")

    log_r1 = np.asarray(model.log_prior(phi_draws), dtype=float) - mvn_logpdf(
        phi_draws, pseudo.g_phi
    )
    if pseudo.g_delta.dim:
        log_r2 = np.asarray(model.log_prior_delta(delta_draws, phi_draws), dtype=float) - mvn_logpdf(
            delta_draws, pseudo.g_delta
        )
    else:
        log_r2 = np.zeros(phi_draws.shape[0])
    components = np.column_stack([log_r1, np.broadcast_to(log_r2, log_r1.shape), log_r3])
    bad = np.argwhere(~np.isfinite(components))
    if bad.size:
        draw, factor = bad[0]
        raise EPError(f"non-finite log {FACTOR_NAMES[factor]} at draw {draw}")
    return ImportanceRatios(components.sum(axis=1), components)


def update_delta_pseudo_prior(delta_draws: ArrayLike, weights: SmoothedWeights) -> GaussianApprox:
    """N(δ̄, V_δ) from the smoothed weights; raises WeightCollapseError on collapse."""
    moments = weighted_moments(delta_draws, weights.weights)
    return GaussianApprox(moments.mean, regularize(moments.cov))


def cavity_update_phi(
    g0: GaussianApprox,
    p1: GaussianApprox,
    p2: GaussianApprox,
    relaxation: Relaxation = Relaxation.DAMPED,
) -> tuple[GaussianApprox, int]:
    """
    Gaussian approximation of p0 p2 / p1 and the number of halvings used.

    In precision form Σ⁻¹ = Σ0⁻¹ + Σ2⁻¹ − Σ1⁻¹ and
    Σ⁻¹μ = Σ0⁻¹μ0 + Σ2⁻¹μ2 − Σ1⁻¹μ1. When that precision is not positive
    definite the subtracted term is scaled by 2⁻ⁿ for the smallest n that
    restores it. With Relaxation.PAPER_LITERAL the relaxed step instead
    subtracts 2⁻ⁿ times the p2 term.
    """
    if not g0.dim == p1.dim == p2.dim:
        raise EPError(f"dimension mismatch: {g0.dim}, {p1.dim}, {p2.dim}")
    try:
        prec0, shift0 = g0.precision()
        prec1, shift1 = p1.precision()
        prec2, shift2 = p2.precision()
    except GaussianError as exc:
        raise EPError(f"cavity inputs must be positive definite: {exc.message}") from exc

    if relaxation is Relaxation.PAPER_LITERAL:
        sub_prec, sub_shift = prec2, shift2
    else:
        sub_prec, sub_shift = prec1, shift1

    for n in range(MAX_HALVINGS + 1):
        if n == 0:
            prec = prec0 + prec2 - prec1
            shift = shift0 + shift2 - shift1
        else:
            prec = prec0 + prec2 - sub_prec / 2.0**n
            shift = shift0 + shift2 - sub_shift / 2.0**n
        prec = symmetrize(prec)
        if is_positive_definite(prec):
            if n:
                logger.warning("cavity precision not positive definite; relaxed with n = %d", n)
            cov = symmetrize(np.linalg.inv(prec))
            return GaussianApprox(np.linalg.solve(prec, shift), cov), n
    raise EPError(f"cavity precision still not positive definite after {MAX_HALVINGS} halvings")


def apply_variance_floor(
    g_phi: GaussianApprox, prior_var: ArrayLike, n_max: float
) -> GaussianApprox:
    """
    Keep g(φ) from being worth more than n_max prior observations.

    Any component with var(p)/var(g) above n_max gets the minimal diagonal
    addition that brings its variance up to var(p)/n_max. The mean is unchanged.
    """
    prior_var = np.asarray(prior_var, dtype=float)
    floor = prior_var / n_max
    extra = np.maximum(floor - np.diag(g_phi.cov), 0.0)
    if not np.any(extra > 0):
        return g_phi
    return GaussianApprox(g_phi.mean, g_phi.cov + np.diag(extra))
