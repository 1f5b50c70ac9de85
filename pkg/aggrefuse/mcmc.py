"""
Embedded posterior sampler and the split-chain R-hat diagnostic.

The sampler is an adaptive Metropolis-within-Gibbs scheme for hierarchical
targets: the global parameter vector is updated as one random-walk block whose
proposal covariance is learned during warmup, and every individual-level
block α_j is updated independently (they are conditionally independent given
the global parameters), all J in one vectorized step. Adaptation stops at the
end of warmup.
"""

from __future__ import annotations

import concurrent.futures
import logging
from dataclasses import dataclass
from typing import Protocol

import numpy as np
from numpy.typing import NDArray

from aggrefuse.gaussian import GaussianApprox, GaussianError, cholesky, mvn_logpdf
from aggrefuse.model import LocalDataset, ModelSpec

logger = logging.getLogger(__name__)

# Chain initialization and adaptation are retried this many times.
MAX_RETRIES = 3
# Target acceptance rates for multivariate and scalar blocks.
TARGET_ACCEPT_BLOCK = 0.23
TARGET_ACCEPT_SCALAR = 0.44
INITIAL_ALPHA_SCALE = 0.1
# Adapted proposal scales outside these bounds mean adaptation diverged.
MIN_LOG_SCALE = np.log(1e-10)
MAX_LOG_SCALE = np.log(1e6)


class SamplerError(Exception):
    """Exception raised when the sampler cannot produce valid draws."""

    def __init__(self, message: str) -> None:
        self.message = message
        super().__init__(self.message)


class _AdaptationDiverged(Exception):
    pass


class HierarchicalTarget(Protocol):
    """
    Unnormalized log density split into a global term and per-individual terms.

    log p(θ, α) = log_global(θ) + Σ_j log_local(α, θ)[j]
    """

    names: tuple[str, ...]
    n_alpha: int
    n_individuals: int

    def log_global(self, theta: NDArray) -> float:
        """Terms that depend on the global parameters only."""

    def log_local(self, alpha: NDArray, theta: NDArray) -> NDArray:
        """Per-individual terms, a length-J vector."""

    def initial_global(self, rng: np.random.Generator) -> NDArray:
        """Starting point for the global parameters."""

    def initial_local(self, theta: NDArray, rng: np.random.Generator) -> NDArray:
        """Starting point for α given θ."""


@dataclass(frozen=True)
class SamplerConfig:
    """Run settings for the sampler."""

    n_chains: int = 4
    n_iterations: int = 1000
    warmup_fraction: float = 0.5
    seed: int = 0
    # Gibbs sweeps (one global and one individual-level update each) per kept draw.
    sweeps_per_iteration: int = 3
    # Robbins-Monro step size decays as iteration ** -adaptation_decay.
    adaptation_decay: float = 0.6
    threads: int = 1

    def __post_init__(self) -> None:
        if self.n_chains < 1:
            raise SamplerError("n_chains must be positive")
        if self.n_iterations < 50:
            raise SamplerError(f"n_iterations must be at least 50, got {self.n_iterations}")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise SamplerError("warmup_fraction must lie in (0, 1)")
        if self.sweeps_per_iteration < 1 or self.threads < 1:
            raise SamplerError("sweeps_per_iteration and threads must be positive")

    @property
    def n_warmup(self) -> int:
        """Warmup iterations, so that warmup is warmup_fraction of each chain."""
        return int(round(self.n_iterations * self.warmup_fraction / (1.0 - self.warmup_fraction)))


@dataclass(frozen=True)
class ParameterDraws:
    """Post-warmup draws of the global parameters, chains stacked in order."""

    draws: NDArray[np.float64]
    chain_ids: NDArray[np.int_]
    names: tuple[str, ...]
    acceptance: NDArray[np.float64]

    @property
    def n_draws(self) -> int:
        """S."""
        return int(self.draws.shape[0])

    @property
    def n_chains(self) -> int:
        """Number of distinct chains."""
        return int(np.unique(self.chain_ids).size)

    def by_chain(self) -> NDArray[np.float64]:
        """Draws as an (n_chains, n_per_chain, d) array."""
        chains = [self.draws[self.chain_ids == c] for c in np.unique(self.chain_ids)]
        if len({c.shape[0] for c in chains}) != 1:
            raise SamplerError("chains have unequal lengths")
        return np.stack(chains)


class PseudoPosterior:
    """g(φ) ∏ p(α_j|φ) p(y_j|α_j, φ) for a model, a pseudo-prior and local data."""

    def __init__(self, model: ModelSpec, pseudo_prior: GaussianApprox, data: LocalDataset):
        if pseudo_prior.dim != model.parameter_spec.dim_phi:
            raise SamplerError(
                f"pseudo-prior of dimension {pseudo_prior.dim} does not match "
                f"{model.parameter_spec.dim_phi} model parameters"
            )
        self.model = model
        self.pseudo_prior = pseudo_prior
        self.data = data
        self.names = model.parameter_spec.names
        self.n_alpha = model.n_alpha
        self.n_individuals = data.n_individuals

    def log_global(self, theta: NDArray) -> float:
        return float(mvn_logpdf(theta, self.pseudo_prior))

    def log_local(self, alpha: NDArray, theta: NDArray) -> NDArray:
        d = self.data
        return self.model.log_individual_prior(alpha, theta) + self.model.log_likelihood(
            d.y, alpha, theta, d.x, d.arms
        )

    def initial_global(self, rng: np.random.Generator) -> NDArray:
        return self.pseudo_prior.sample(1, rng)[0]

    def initial_local(self, theta: NDArray, rng: np.random.Generator) -> NDArray:
        return self.model.sample_individual(theta, self.data.arms, rng)


class LocalPosterior(PseudoPosterior):
    """
    p(φ) ∏ p(α_j|φ) p(y_j|α_j, φ): the local-data fit under the model prior.

    start only supplies chain starting points.
    """

    def __init__(self, model: ModelSpec, data: LocalDataset, start: GaussianApprox):
        super().__init__(model, start, data)

    def log_global(self, theta: NDArray) -> float:
        return float(self.model.log_prior(theta))


def _initialize(target: HierarchicalTarget, rng: np.random.Generator):
    block = "phi"
    for attempt in range(MAX_RETRIES + 1):
        theta = np.asarray(target.initial_global(rng), dtype=float)
        log_g = target.log_global(theta)
        if not np.isfinite(log_g):
            block = "phi"
        else:
            alpha = np.asarray(target.initial_local(theta, rng), dtype=float)
            alpha = alpha.reshape(target.n_individuals, target.n_alpha)
            local = np.asarray(target.log_local(alpha, theta), dtype=float)
            if np.all(np.isfinite(local)):
                return theta, alpha, log_g, local
            block = "alpha"
        logger.warning("non-finite target in the %s block at initialization (attempt %d)", block, attempt + 1)
    raise SamplerError(f"non-finite target at initialization in the {block} block")


def _accept(log_ratio: NDArray | float, rng: np.random.Generator, size=None):
    """Metropolis test; NaN ratios are rejected. Returns (accepted, probability)."""
    log_ratio = np.nan_to_num(np.asarray(log_ratio, dtype=float), nan=-np.inf)
    prob = np.exp(np.minimum(log_ratio, 0.0))
    accepted = np.log(rng.uniform(size=size)) < log_ratio
    return accepted, prob


def _run_chain(target: HierarchicalTarget, cfg: SamplerConfig, rng: np.random.Generator):
    theta, alpha, log_g, local = _initialize(target, rng)
    d = theta.size
    n_ind, n_alpha = alpha.shape
    alpha_target = TARGET_ACCEPT_SCALAR if n_alpha == 1 else TARGET_ACCEPT_BLOCK
    phi_target = TARGET_ACCEPT_SCALAR if d == 1 else TARGET_ACCEPT_BLOCK

    n_warmup = cfg.n_warmup
    proposal_chol = np.eye(d)
    log_phi_scale = np.log(0.1 / np.sqrt(d))
    log_alpha_scale = np.full(n_ind, np.log(INITIAL_ALPHA_SCALE))
    history = np.empty((n_warmup, d))
    # Proposal covariance is re-estimated from the later half of the warmup
    # draws seen so far at these iterations.
    checkpoints = {n_warmup // 2, (3 * n_warmup) // 4}

    out = np.empty((cfg.n_iterations, d))
    accepted_count = 0
    for it in range(n_warmup + cfg.n_iterations):
        adapting = it < n_warmup
        gamma = (it + 1.0) ** -cfg.adaptation_decay
        for _ in range(cfg.sweeps_per_iteration):
            prop = theta + np.exp(log_phi_scale) * (proposal_chol @ rng.standard_normal(d))
            prop_g = target.log_global(prop)
            prop_local = target.log_local(alpha, prop) if np.isfinite(prop_g) else local
            ok, prob = _accept(prop_g + np.sum(prop_local) - log_g - np.sum(local), rng)
            if ok:
                theta, log_g, local = prop, prop_g, np.asarray(prop_local, dtype=float)
                accepted_count += int(not adapting)
            if adapting:
                log_phi_scale += gamma * (float(prob) - phi_target)

            if n_alpha and n_ind:
                step = np.exp(log_alpha_scale)[:, None] * rng.standard_normal(alpha.shape)
                prop_alpha = alpha + step
                prop_local = np.asarray(target.log_local(prop_alpha, theta), dtype=float)
                ok, prob = _accept(prop_local - local, rng, size=n_ind)
                alpha[ok] = prop_alpha[ok]
                local[ok] = prop_local[ok]
                if adapting:
                    log_alpha_scale += gamma * (prob - alpha_target)

        if adapting:
            history[it] = theta
            window = history[(it + 1) // 2 : it + 1]
            if it in checkpoints and window.shape[0] > 2 * d:
                try:
                    cov = np.cov(window, rowvar=False).reshape(d, d)
                    proposal_chol = cholesky(cov + 1e-10 * np.eye(d), "proposal covariance")
                    log_phi_scale = np.log(2.38 / np.sqrt(d))
                except GaussianError:
                    logger.debug("warmup covariance not positive definite; keeping proposal")
            if it == n_warmup - 1:
                scales = np.append(log_alpha_scale, log_phi_scale)
                if not np.all(np.isfinite(scales)) or scales.min() < MIN_LOG_SCALE or scales.max() > MAX_LOG_SCALE:
                    raise _AdaptationDiverged()
        else:
            out[it - n_warmup] = theta

    if not np.all(np.isfinite(out)):
        raise _AdaptationDiverged()
    return out, accepted_count / (cfg.n_iterations * cfg.sweeps_per_iteration)


def _sample_chain(target: HierarchicalTarget, cfg: SamplerConfig, chain: int):
    for attempt in range(MAX_RETRIES + 1):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, chain, attempt]))
        try:
            return _run_chain(target, cfg, rng)
        except _AdaptationDiverged:
            logger.warning("chain %d: adaptation diverged, retrying (%d)", chain, attempt + 1)
    raise SamplerError(f"chain {chain}: adaptation diverged after {MAX_RETRIES} retries")


def sample_target(target: HierarchicalTarget, cfg: SamplerConfig) -> ParameterDraws:
    """Run cfg.n_chains independent chains on target and stack the draws."""
    with concurrent.futures.ThreadPoolExecutor(max_workers=cfg.threads) as executor:
        results = list(executor.map(lambda c: _sample_chain(target, cfg, c), range(cfg.n_chains)))
    draws = np.concatenate([r[0] for r in results])
    chain_ids = np.repeat(np.arange(cfg.n_chains), cfg.n_iterations)
    acceptance = np.array([r[1] for r in results])
    logger.debug("sampled %d draws, acceptance %s", draws.shape[0], np.round(acceptance, 3))
    return ParameterDraws(draws, chain_ids, tuple(target.names), acceptance)


def sample_pseudo_posterior(
    model: ModelSpec, pseudo_prior: GaussianApprox, data: LocalDataset, cfg: SamplerConfig
) -> ParameterDraws:
    """
    Draw φ from g(φ) ∏ p(α_j|φ) p(y_j|α_j, φ), discarding the α draws.
    """
    return sample_target(PseudoPosterior(model, pseudo_prior, data), cfg)


def sample_local_posterior(
    model: ModelSpec, data: LocalDataset, start: GaussianApprox, cfg: SamplerConfig
) -> ParameterDraws:
    """Draw φ from the local-data posterior under the model prior."""
    return sample_target(LocalPosterior(model, data, start), cfg)


def potential_scale_reduction(chains: NDArray) -> NDArray[np.float64]:
    """
    Gelman-Rubin R-hat for an (m, n, d) array of m chains, clamped below at 1.

    Zero within- and between-chain variance gives 1; zero within-chain but
    positive between-chain variance gives inf.
    """
    chains = np.asarray(chains, dtype=float)
    if chains.ndim == 2:
        chains = chains[:, :, None]
    n = chains.shape[1]
    means = chains.mean(axis=1)
    within = chains.var(axis=1, ddof=1).mean(axis=0)
    between = n * means.var(axis=0, ddof=1)
    var_hat = (n - 1) / n * within + between / n
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.sqrt(var_hat / within)
    r = np.where(within > 0, r, np.where(between > 0, np.inf, 1.0))
    return np.maximum(r, 1.0)


def rhat(draws: ParameterDraws) -> NDArray[np.float64]:
    """Split-chain R-hat per parameter."""
    chains = draws.by_chain()
    if chains.shape[0] < 2:
        raise SamplerError("R-hat needs at least two chains")
    if chains.shape[1] < 10:
        raise SamplerError("R-hat needs at least ten draws per chain")
    half = chains.shape[1] // 2
    split = np.concatenate([chains[:, :half], chains[:, chains.shape[1] - half :]])
    return potential_scale_reduction(split)
