"""
Reference fits used to judge the algorithm's output:

    red    local data only, φ under p(φ)
    green  local data and the complete external data, (φ, δ) jointly
    blue   local data and the external averages under their exact likelihood,
           which only the linear model has in closed form
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from aggrefuse.gaussian import GaussianApprox, GaussianError, mvn_logpdf
from aggrefuse.mcmc import ParameterDraws, SamplerConfig, rhat, sample_local_posterior, sample_target
from aggrefuse.model import ExternalSummary, LocalDataset, ModelSpec, shift_parameters
from aggrefuse.models import LinearModel

logger = logging.getLogger(__name__)

# Starting spread of δ in the joint fits.
DELTA_START_SD = 0.1


class OracleError(Exception):
    """Exception raised for unsupported or invalid reference fits."""

    def __init__(self, message: str) -> None:
        self.message = message
        super().__init__(self.message)


@dataclass(frozen=True)
class OracleConfig:
    """Sampler settings for reference fits."""

    n_chains: int = 4
    n_iterations: int = 4000
    seed: int = 0
    rhat_gate: float = 1.01
    threads: int = 1

    def sampler_config(self) -> SamplerConfig:
        """The matching SamplerConfig."""
        return SamplerConfig(
            n_chains=self.n_chains, n_iterations=self.n_iterations, seed=self.seed, threads=self.threads
        )


@dataclass(frozen=True)
class PosteriorSummary:
    """Posterior mean, sd and R-hat per parameter of one reference fit."""

    label: str
    names: tuple[str, ...]
    mean: NDArray[np.float64]
    sd: NDArray[np.float64]
    rhat: NDArray[np.float64]


def linear_average_moments(phi_prime: ArrayLike, x: ArrayLike, n_individuals: int) -> GaussianApprox:
    """
    Exact distribution of the averages of n_individuals draws from the linear
    model at φ′: mean μ1 + μ2 x_t + β x_t² and covariance
    (σ_α1² + σ_α2² x_t x_u + σ_y² 1{t=u}) / J′.
    """
    phi_prime = np.asarray(phi_prime, dtype=float)
    if phi_prime.shape != (6,):
        raise OracleError(f"linear model has 6 parameters, got {phi_prime.size}")
    if np.any(np.isnan(phi_prime)):
        raise OracleError("parameters must not be NaN")
    mu1, mu2, beta = phi_prime[:3]
    s1, s2, sy = np.exp(phi_prime[3:])
    if sy <= 0.0 or not np.all(np.isfinite([s1, s2, sy])):
        raise OracleError("the residual variance must be positive and all variances finite")
    x = np.asarray(x, dtype=float)
    mean = mu1 + mu2 * x + beta * x**2
    cov = (s1**2 + s2**2 * np.outer(x, x) + sy**2 * np.eye(x.size)) / n_individuals
    return GaussianApprox(mean, cov)


def linear_average_loglik_exact(phi_prime: ArrayLike, external: ExternalSummary) -> float:
    """log p(ȳ′ | φ′) for the linear model."""
    try:
        return float(mvn_logpdf(external.y_bar, linear_average_moments(phi_prime, external.x, external.n_individuals)))
    except GaussianError as exc:
        raise OracleError(exc.message) from exc


class _JointTarget:
    """Common parts of the (φ, δ) reference targets."""

    def __init__(self, model: ModelSpec, data: LocalDataset, start: GaussianApprox):
        spec = model.parameter_spec
        if start.dim != spec.dim_phi:
            raise OracleError(f"start of dimension {start.dim} given for {spec.dim_phi} parameters")
        self.model = model
        self.data = data
        self.start = start
        self.spec = spec
        self.names = spec.all_names
        self.n_alpha = model.n_alpha
        self.n_individuals = data.n_individuals

    def split(self, theta: NDArray) -> tuple[NDArray, NDArray]:
        """(φ, φ′) from θ = (φ, δ)."""
        phi = theta[: self.spec.dim_phi]
        return phi, shift_parameters(phi, theta[self.spec.dim_phi :], self.spec)

    def log_priors(self, theta: NDArray) -> float:
        phi, delta = theta[: self.spec.dim_phi], theta[self.spec.dim_phi :]
        return float(self.model.log_prior(phi)) + float(self.model.log_prior_delta(delta, phi))

    def initial_global(self, rng: np.random.Generator) -> NDArray:
        delta = DELTA_START_SD * rng.standard_normal(self.spec.dim_delta)
        return np.concatenate([self.start.sample(1, rng)[0], delta])

    def _local_terms(self, alpha: NDArray, phi: NDArray) -> NDArray:
        d = self.data
        return self.model.log_individual_prior(alpha, phi) + self.model.log_likelihood(d.y, alpha, phi, d.x, d.arms)


class CompleteDataPosterior(_JointTarget):
    """p(φ) p(δ|φ) over local individuals at φ and external individuals at φ + δ."""

    def __init__(self, model: ModelSpec, data: LocalDataset, external_full: LocalDataset, start: GaussianApprox):
        super().__init__(model, data, start)
        self.external_full = external_full
        self.n_individuals = data.n_individuals + external_full.n_individuals

    def log_global(self, theta: NDArray) -> float:
        return self.log_priors(theta)

    def log_local(self, alpha: NDArray, theta: NDArray) -> NDArray:
        phi, phi_prime = self.split(theta)
        j = self.data.n_individuals
        e = self.external_full
        ext = self.model.log_individual_prior(alpha[j:], phi_prime) + self.model.log_likelihood(
            e.y, alpha[j:], phi_prime, e.x, e.arms
        )
        return np.concatenate([self._local_terms(alpha[:j], phi), ext])

    def initial_local(self, theta: NDArray, rng: np.random.Generator) -> NDArray:
        phi, phi_prime = self.split(theta)
        return np.concatenate([
            self.model.sample_individual(phi, self.data.arms, rng),
            self.model.sample_individual(phi_prime, self.external_full.arms, rng),
        ])


class AverageDataPosterior(_JointTarget):
    """Local individuals at φ plus the exact linear-model likelihood of ȳ′ at φ + δ."""

    def __init__(self, model: LinearModel, data: LocalDataset, external: ExternalSummary, start: GaussianApprox):
        super().__init__(model, data, start)
        self.external = external

    def log_global(self, theta: NDArray) -> float:
        _, phi_prime = self.split(theta)
        try:
            return self.log_priors(theta) + linear_average_loglik_exact(phi_prime, self.external)
        except OracleError:
            return -math.inf

    def log_local(self, alpha: NDArray, theta: NDArray) -> NDArray:
        phi, _ = self.split(theta)
        return self._local_terms(alpha, phi)

    def initial_local(self, theta: NDArray, rng: np.random.Generator) -> NDArray:
        phi, _ = self.split(theta)
        return self.model.sample_individual(phi, self.data.arms, rng)


def _summarize(label: str, draws: ParameterDraws, cfg: OracleConfig) -> PosteriorSummary:
    r = rhat(draws) if draws.n_chains > 1 else np.full(len(draws.names), math.nan)
    if np.any(r >= cfg.rhat_gate):
        logger.warning(
            "%s fit: R-hat up to %.3f exceeds %.2f; increase oracle iterations",
            label, float(np.nanmax(r)), cfg.rhat_gate,
        )
    return PosteriorSummary(label, draws.names, draws.draws.mean(axis=0), draws.draws.std(axis=0, ddof=1), r)


def fit_red(model: ModelSpec, data: LocalDataset, start: GaussianApprox, cfg: OracleConfig) -> PosteriorSummary:
    """Posterior of φ from the local data alone."""
    draws = sample_local_posterior(model, data, start, cfg.sampler_config())
    return _summarize("red", draws, cfg)


def fit_green(
    model: ModelSpec,
    data: LocalDataset,
    external_full: LocalDataset,
    start: GaussianApprox,
    cfg: OracleConfig,
) -> PosteriorSummary:
    """Posterior of (φ, δ) from the local and the complete external data."""
    target = CompleteDataPosterior(model, data, external_full, start)
    return _summarize("green", sample_target(target, cfg.sampler_config()), cfg)


def fit_blue(
    model: ModelSpec,
    data: LocalDataset,
    external: ExternalSummary,
    start: GaussianApprox,
    cfg: OracleConfig,
) -> PosteriorSummary:
    """Posterior of (φ, δ) from the local data and the exact likelihood of ȳ′."""
    if not isinstance(model, LinearModel):
        raise OracleError(f"no closed-form average-data likelihood for {type(model).__name__}")
    target = AverageDataPosterior(model, data, external, start)
    return _summarize("blue", sample_target(target, cfg.sampler_config()), cfg)
