"""
The iterative fit: MCMC on the local data under a pseudo-prior, importance
weighting against the averaged external data, and pseudo-prior updates until
the weights settle.

One run is outer_steps passes of

    1. sample φ from g(φ) ∏ p(α_j|φ) p(y_j|α_j, φ);
    2. inner_steps times: draw δ from g(δ), score φ + δ against ȳ′, Pareto-smooth
       the ratios and refresh g(δ);
    3. refresh g(φ) with the cavity update and the variance floor.

The MCMC draws are reused for every inner step of an outer step.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from aggrefuse.aggregate import average_data_logliks
from aggrefuse.ep import (
    PseudoPriorPair,
    Relaxation,
    apply_variance_floor,
    cavity_update_phi,
    importance_log_ratios,
    update_delta_pseudo_prior,
)
from aggrefuse.gaussian import GaussianApprox, WeightCollapseError, regularize, weighted_moments
from aggrefuse.mcmc import (
    ParameterDraws,
    SamplerConfig,
    potential_scale_reduction,
    rhat,
    sample_local_posterior,
    sample_pseudo_posterior,
)
from aggrefuse.model import ExternalSummary, LocalDataset, ModelSpec, ParameterSpec, shift_parameters
from aggrefuse.psis import (
    ImportanceRatios,
    SmoothedWeights,
    log_efficiency_ratios,
    pareto_smooth,
)

logger = logging.getLogger(__name__)

# Initial pseudo-prior means are drawn with this standard deviation.
INIT_MEAN_SD = 0.5
# Fraction of each trace compared across runs.
CONVERGENCE_WINDOW = 0.3
RHAT_THRESHOLD = 1.1
K_HAT_THRESHOLD = 1.0


class AlgorithmError(Exception):
    """Exception raised when a run cannot continue; carries the trace so far."""

    def __init__(self, message: str, trace: Optional[RunTrace] = None) -> None:
        self.message = message
        self.trace = trace
        super().__init__(self.message)


class StepMode(Enum):
    """How g(δ) was refreshed at an inner step."""

    RESAMPLE = "resample"
    WEIGHTED = "weighted"


@dataclass(frozen=True)
class Schedule:
    """Loop sizes and their growth across outer steps."""

    outer_steps: int = 10
    inner_steps: int = 10
    initial_mcmc_iterations: int = 100
    mcmc_growth: float = math.sqrt(2.0)
    j_tilde: int = 1000
    # Counted over the inner steps of one run.
    resample_warmup_steps: int = 25
    n_floor_initial: float = 2.0
    n_floor_growth: float = math.sqrt(2.0)
    n_runs: int = 3
    n_chains: int = 4
    inner_growth: float = 1.0
    jtilde_growth: float = 1.0
    relaxation: Relaxation = Relaxation.DAMPED
    threads: int = 1

    def __post_init__(self) -> None:
        counts = {
            "outer_steps": self.outer_steps,
            "inner_steps": self.inner_steps,
            "j_tilde": self.j_tilde,
            "n_runs": self.n_runs,
            "n_chains": self.n_chains,
            "threads": self.threads,
        }
        for name, value in counts.items():
            if value < 1:
                raise AlgorithmError(f"{name} must be positive, got {value}")
        if self.initial_mcmc_iterations < 50:
            raise AlgorithmError("initial_mcmc_iterations must be at least 50")
        if self.resample_warmup_steps < 0 or self.n_floor_initial <= 0:
            raise AlgorithmError("resample_warmup_steps and n_floor_initial must be nonnegative and positive")
        growth = {
            "mcmc_growth": self.mcmc_growth,
            "n_floor_growth": self.n_floor_growth,
            "inner_growth": self.inner_growth,
            "jtilde_growth": self.jtilde_growth,
        }
        for name, value in growth.items():
            if value < 1.0:
                raise AlgorithmError(f"{name} must be at least 1, got {value}")

    def mcmc_iterations(self, outer: int) -> int:
        """Iterations per chain at an outer step."""
        return int(round(self.initial_mcmc_iterations * self.mcmc_growth**outer))

    def n_floor(self, outer: int) -> float:
        """Largest prior-equivalent sample size g(φ) may reach after an outer step."""
        return self.n_floor_initial * self.n_floor_growth**outer

    def inner_steps_at(self, outer: int) -> int:
        """Inner steps at an outer step."""
        return int(round(self.inner_steps * self.inner_growth**outer))

    def j_tilde_at(self, outer: int) -> int:
        """Simulated individuals per draw at an outer step."""
        return int(round(self.j_tilde * self.jtilde_growth**outer))


@dataclass(frozen=True)
class StepRecord:
    """Weighted posterior summaries and diagnostics after one inner step."""

    step: int
    outer: int
    inner: int
    mean: NDArray[np.float64]
    sd: NDArray[np.float64]
    k_hat: float
    efficiency: float
    # Halvings used by the cavity update that produced the current g(φ).
    relaxation: int
    rhat_mcmc: NDArray[np.float64]
    mode: StepMode


@dataclass
class RunTrace:
    """Every inner step of one run, plus the final draws and weights."""

    run_id: int
    seed: int
    names: tuple[str, ...]
    dim_phi: int
    schedule: Schedule
    records: list[StepRecord] = field(default_factory=list)
    final_draws: Optional[NDArray[np.float64]] = None
    final_weights: Optional[NDArray[np.float64]] = None
    pseudo_priors: Optional[PseudoPriorPair] = None

    @property
    def n_steps(self) -> int:
        """Number of recorded inner steps."""
        return len(self.records)

    def means(self) -> NDArray[np.float64]:
        """Weighted means as an (n_steps, n_parameters) array."""
        return np.array([r.mean for r in self.records])

    def k_hats(self) -> NDArray[np.float64]:
        """k̂ at every step."""
        return np.array([r.k_hat for r in self.records])

    @property
    def final(self) -> StepRecord:
        """The last recorded step."""
        if not self.records:
            raise AlgorithmError(f"run {self.run_id} has no recorded steps")
        return self.records[-1]


@dataclass(frozen=True)
class ConvergenceReport:
    """Cross-run R-hat of the weighted means, final k̂ per run and the verdict."""

    names: tuple[str, ...]
    rhat: NDArray[np.float64]
    final_k_hat: NDArray[np.float64]
    converged: bool


@dataclass(frozen=True)
class BasicResult:
    """Weighted summaries from the one-pass importance sampler."""

    names: tuple[str, ...]
    draws: NDArray[np.float64]
    weights: SmoothedWeights
    mean: NDArray[np.float64]
    sd: NDArray[np.float64]
    efficiency: float


def initialize_pseudo_priors(
    spec: ParameterSpec, rng: np.random.Generator, center: Optional[ArrayLike] = None
) -> PseudoPriorPair:
    """
    g(φ) and g(δ) with identity covariance and means drawn N(center, 0.5²).

    center defaults to zero; it only applies to φ.
    """
    phi_center = np.zeros(spec.dim_phi) if center is None else np.asarray(center, dtype=float)
    if phi_center.shape != (spec.dim_phi,):
        raise AlgorithmError(f"center of length {phi_center.size} given for {spec.dim_phi} parameters")
    phi_mean = phi_center + rng.normal(0.0, INIT_MEAN_SD, spec.dim_phi)
    delta_mean = rng.normal(0.0, INIT_MEAN_SD, spec.dim_delta)
    return PseudoPriorPair(
        GaussianApprox(phi_mean, np.eye(spec.dim_phi)),
        GaussianApprox(delta_mean, np.eye(spec.dim_delta)),
    )


def _resample_indices(weights: NDArray, m: int, rng: np.random.Generator) -> NDArray[np.int_]:
    positive = int(np.count_nonzero(weights > 0))
    if m > positive:
        logger.debug("resample size reduced from %d to %d positive weights", m, positive)
        m = positive
    if m < 2:
        raise WeightCollapseError(f"only {m} draws can be resampled; the weights have collapsed")
    return rng.choice(weights.size, size=m, replace=False, p=weights / weights.sum())


def _resampled_moments(samples: NDArray, weights: NDArray, m: int, rng: np.random.Generator) -> GaussianApprox:
    idx = _resample_indices(np.asarray(weights, dtype=float), m, rng)
    moments = weighted_moments(samples[idx], np.ones(idx.size))
    return GaussianApprox(moments.mean, regularize(moments.cov))


def resample_update_delta(
    delta_draws: ArrayLike, weights: SmoothedWeights, m: int, rng: np.random.Generator
) -> GaussianApprox:
    """
    Moment match m draws of δ taken without replacement with probability
    proportional to the weights.

    Keeps g(δ) from shrinking to a point when a few weights dominate. m is cut
    to the number of positive weights; fewer than two raises WeightCollapseError.
    """
    delta_draws = np.asarray(delta_draws, dtype=float)
    if delta_draws.ndim == 1:
        delta_draws = delta_draws[:, None]
    if m >= delta_draws.shape[0]:
        raise AlgorithmError(f"resample size {m} must be smaller than the {delta_draws.shape[0]} draws")
    return _resampled_moments(delta_draws, weights.weights, m, rng)


def _weighted_summary(samples: NDArray, weights: NDArray) -> tuple[NDArray, NDArray]:
    mean = np.average(samples, axis=0, weights=weights)
    var = np.average((samples - mean) ** 2, axis=0, weights=weights)
    return mean, np.sqrt(var)


def _mcmc_seed(seed: int, outer: int) -> int:
    return int(np.random.SeedSequence([seed, outer]).generate_state(1)[0])


def run_algorithm(
    model: ModelSpec,
    data: LocalDataset,
    external: ExternalSummary,
    schedule: Schedule,
    init: PseudoPriorPair,
    seed: int,
    run_id: int = 0,
) -> RunTrace:
    """
    Fit the model to local data and averaged external data from the
    pseudo-priors in init.

    During the first schedule.resample_warmup_steps inner steps g(δ) is
    refreshed from a weighted subsample of half the draws; afterwards from the
    weighted moments. A weight collapse after warmup raises AlgorithmError
    with the trace recorded so far.
    """
    spec = model.parameter_spec
    if init.g_phi.dim != spec.dim_phi or init.g_delta.dim != spec.dim_delta:
        raise AlgorithmError("initial pseudo-priors do not match the model parameters")

    trace = RunTrace(run_id, seed, spec.all_names, spec.dim_phi, schedule)
    pseudo = init
    relaxation_used = 0
    step = 0

    for outer in range(schedule.outer_steps):
        cfg = SamplerConfig(
            n_chains=schedule.n_chains,
            n_iterations=schedule.mcmc_iterations(outer),
            seed=_mcmc_seed(seed, outer),
            threads=schedule.threads,
        )
        logger.info("run %d, outer step %d: sampling %d iterations x %d chains", run_id, outer, cfg.n_iterations, cfg.n_chains)
        draws: ParameterDraws = sample_pseudo_posterior(model, pseudo.g_phi, data, cfg)
        phi = draws.draws
        n_draws = phi.shape[0]
        rhat_phi = rhat(draws) if cfg.n_chains > 1 else np.full(spec.dim_phi, math.nan)
        j_tilde = schedule.j_tilde_at(outer)

        weights: Optional[SmoothedWeights] = None
        for inner in range(schedule.inner_steps_at(outer)):
            rng = np.random.default_rng(np.random.SeedSequence([seed, outer, inner, 0]))
            if spec.dim_delta:
                delta = pseudo.g_delta.sample(n_draws, rng)
            else:
                delta = np.empty((n_draws, 0))
            phi_prime = shift_parameters(phi, delta, spec)
            log_r3 = average_data_logliks(
                model,
                phi_prime,
                external,
                j_tilde,
                np.random.SeedSequence([seed, outer, inner, 1]),
                schedule.threads,
            )
            ratios: ImportanceRatios = importance_log_ratios(phi, delta, pseudo, model, log_r3)
            weights = pareto_smooth(ratios)
            eff = log_efficiency_ratios(ratios.log_ratios)

            mode = StepMode.RESAMPLE if step < schedule.resample_warmup_steps else StepMode.WEIGHTED
            g_delta = pseudo.g_delta
            if spec.dim_delta:
                try:
                    if mode is StepMode.RESAMPLE:
                        g_delta = resample_update_delta(delta, weights, n_draws // 2, rng)
                    else:
                        g_delta = update_delta_pseudo_prior(delta, weights)
                except WeightCollapseError as exc:
                    raise AlgorithmError(
                        f"run {run_id}, step {step}: {exc.message}", trace
                    ) from exc

            joint = np.column_stack([phi, delta])
            mean, sd = _weighted_summary(joint, weights.weights)
            trace.records.append(
                StepRecord(
                    step=step,
                    outer=outer,
                    inner=inner,
                    mean=mean,
                    sd=sd,
                    k_hat=weights.k_hat,
                    efficiency=eff,
                    relaxation=relaxation_used,
                    rhat_mcmc=rhat_phi,
                    mode=mode,
                )
            )
            logger.info(
                "run %d, step %d: k_hat %.3f (%s), efficiency %.3f",
                run_id, step, weights.k_hat, weights.regime.value, eff,
            )
            trace.final_draws, trace.final_weights = joint, weights.weights
            pseudo = PseudoPriorPair(pseudo.g_phi, g_delta)
            step += 1

        if weights is None:
            continue
        p1 = weighted_moments(phi, np.ones(n_draws))
        try:
            p2 = weighted_moments(phi, weights.weights)
        except WeightCollapseError as exc:
            if step - 1 >= schedule.resample_warmup_steps:
                raise AlgorithmError(f"run {run_id}, outer step {outer}: {exc.message}", trace) from exc
            rng = np.random.default_rng(np.random.SeedSequence([seed, outer, 2]))
            p2 = _resampled_moments(phi, weights.weights, n_draws // 2, rng)
        p1 = GaussianApprox(p1.mean, regularize(p1.cov))
        p2 = GaussianApprox(p2.mean, regularize(p2.cov))
        g_phi, relaxation_used = cavity_update_phi(pseudo.g_phi, p1, p2, schedule.relaxation)
        g_phi = apply_variance_floor(g_phi, model.prior_variance(), schedule.n_floor(outer))
        pseudo = PseudoPriorPair(g_phi, pseudo.g_delta)

    trace.pseudo_priors = pseudo
    return trace


def check_convergence(traces: Sequence[RunTrace]) -> ConvergenceReport:
    """
    Compare the last 30% of the weighted-mean traces across runs.

    Each run's window is treated as one chain. The verdict is converged iff
    every R-hat is below 1.1 and every run ends with k̂ below 1.
    """
    if len(traces) < 2:
        raise AlgorithmError("convergence checking needs at least two runs")
    first = traces[0]
    for trace in traces[1:]:
        if trace.schedule != first.schedule or trace.n_steps != first.n_steps or trace.names != first.names:
            raise AlgorithmError(f"run {trace.run_id} does not share the schedule of run {first.run_id}")
    n_window = max(2, int(math.ceil(CONVERGENCE_WINDOW * first.n_steps)))
    if first.n_steps < n_window:
        raise AlgorithmError(f"need at least {n_window} steps per run, got {first.n_steps}")

    chains = np.stack([t.means()[-n_window:] for t in traces])
    rhat_runs = potential_scale_reduction(chains)
    final_k = np.array([t.final.k_hat for t in traces])
    # NaN k̂ fails the comparison and so counts as unconverged.
    converged = bool(np.all(rhat_runs < RHAT_THRESHOLD) and np.all(final_k < K_HAT_THRESHOLD))
    return ConvergenceReport(first.names, rhat_runs, final_k, converged)


def run_basic(
    model: ModelSpec,
    data: LocalDataset,
    external: ExternalSummary,
    start: GaussianApprox,
    cfg: SamplerConfig,
    j_tilde: int,
    seed: int,
) -> BasicResult:
    """
    One-pass importance sampler: fit φ to the local data under p(φ), draw δ
    from p(δ) and weight each draw by N(ȳ′ | M̃, Σ̃/J′).

    Only useful when the external data carry little information; the weights
    degrade quickly otherwise.
    """
    spec = model.parameter_spec
    draws = sample_local_posterior(model, data, start, cfg)
    phi = draws.draws
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    delta = np.asarray(model.sample_prior_delta(phi.shape[0], rng), dtype=float).reshape(phi.shape[0], spec.dim_delta)
    log_r3 = average_data_logliks(
        model, shift_parameters(phi, delta, spec), external, j_tilde, np.random.SeedSequence([seed, 1]), cfg.threads
    )
    ratios = ImportanceRatios(log_r3)
    weights = pareto_smooth(ratios)
    joint = np.column_stack([phi, delta])
    mean, sd = _weighted_summary(joint, weights.weights)
    eff = log_efficiency_ratios(ratios.log_ratios)
    logger.info("basic importance sampler: k_hat %.3f, efficiency %.3f", weights.k_hat, eff)
    return BasicResult(spec.all_names, joint, weights, mean, sd, eff)
