"""
Simulation-based normal approximation to the likelihood of averaged data.

For a parameter value φ′ we simulate J̃ hypothetical individuals under the
external study's conditions, take the mean vector M̃ and covariance Σ̃ of
their data, and score the observed averages ȳ′ under N(M̃, Σ̃/J′). The
simulated individuals are only a density-estimation device; they do not stand
for the J′ real ones.
"""

from __future__ import annotations

import concurrent.futures
import logging
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from aggrefuse.gaussian import GaussianApprox, GaussianError, mvn_logpdf, regularize
from aggrefuse.model import ExternalSummary, ModelSpec

logger = logging.getLogger(__name__)

# Draws per independent RNG stream when scoring many parameter draws.
CHUNK_SIZE = 256


class AggregateError(Exception):
    """Exception raised when the average-data likelihood cannot be formed."""

    def __init__(self, message: str) -> None:
        self.message = message
        super().__init__(self.message)


@dataclass(frozen=True)
class PopulationSummary:
    """Mean M̃ and covariance Σ̃ of J̃ simulated individuals."""

    mean: NDArray[np.float64]
    cov: NDArray[np.float64]
    n_simulated: int

    @property
    def rank_deficient(self) -> bool:
        """True when J̃ is too small for a full-rank Σ̃."""
        return self.n_simulated < self.mean.size + 1


def simulate_population(
    model: ModelSpec,
    phi_prime: ArrayLike,
    n_simulated: int,
    context: ExternalSummary,
    rng: np.random.Generator,
) -> NDArray[np.float64]:
    """Simulate a J̃ x T′ data matrix under φ′ at the external design."""
    if n_simulated < 2:
        raise AggregateError("at least two individuals must be simulated")
    phi_prime = np.asarray(phi_prime, dtype=float)
    arms = context.arm_indicators(n_simulated)
    alpha = model.sample_individual(phi_prime, arms, rng)
    y = np.asarray(model.simulate_observations(alpha, phi_prime, context.x, arms, rng), dtype=float)
    if not np.all(np.isfinite(y)):
        raise AggregateError(f"simulation produced non-finite data at φ′ = {phi_prime}")
    return y


def summarize_population(data: ArrayLike) -> PopulationSummary:
    """Column means and sample covariance of the rows."""
    data = np.asarray(data, dtype=float)
    if data.ndim != 2 or data.shape[0] < 2:
        raise AggregateError(f"need a matrix with at least two rows, got shape {data.shape}")
    cov = np.cov(data, rowvar=False).reshape(data.shape[1], data.shape[1])
    summary = PopulationSummary(data.mean(axis=0), cov, data.shape[0])
    if summary.rank_deficient:
        logger.warning("J̃ = %d is too small for a full-rank covariance", data.shape[0])
    return summary


def average_data_loglik(summary: PopulationSummary, external: ExternalSummary) -> float:
    """log N(ȳ′ | M̃, Σ̃/J′), with diagonal jitter on Σ̃/J′."""
    if summary.mean.shape != external.y_bar.shape:
        raise AggregateError(
            f"summary of length {summary.mean.size} does not match "
            f"{external.y_bar.size} external averages"
        )
    cov = regularize(summary.cov / external.n_individuals)
    try:
        return float(mvn_logpdf(external.y_bar, GaussianApprox(summary.mean, cov)))
    except GaussianError as exc:
        raise AggregateError(
            f"simulated covariance is singular ({exc.message}); try a larger J̃"
        ) from exc


def _score_chunk(model, phi_primes, start, n_simulated, external, seed) -> NDArray:
    rng = np.random.default_rng(seed)
    out = np.empty(phi_primes.shape[0])
    for i, phi_prime in enumerate(phi_primes):
        try:
            data = simulate_population(model, phi_prime, n_simulated, external, rng)
        except AggregateError as exc:
            raise AggregateError(f"draw {start + i}: {exc.message}") from exc
        out[i] = average_data_loglik(summarize_population(data), external)
    return out


def average_data_logliks(
    model: ModelSpec,
    phi_primes: ArrayLike,
    external: ExternalSummary,
    n_simulated: int,
    seed: np.random.SeedSequence,
    threads: int = 1,
) -> NDArray[np.float64]:
    """
    log r(3) for every row of phi_primes, with a fresh population per draw.

    Draws are split into fixed chunks with one spawned RNG stream each, so the
    result does not depend on the number of threads.
    """
    phi_primes = np.atleast_2d(np.asarray(phi_primes, dtype=float))
    starts = list(range(0, phi_primes.shape[0], CHUNK_SIZE))
    seeds = seed.spawn(len(starts))
    with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as executor:
        futures = [
            executor.submit(
                _score_chunk, model, phi_primes[s : s + CHUNK_SIZE], s, n_simulated, external, sq
            )
            for s, sq in zip(starts, seeds)
        ]
        parts = [f.result() for f in futures]
    return np.concatenate(parts) if parts else np.empty(0)
