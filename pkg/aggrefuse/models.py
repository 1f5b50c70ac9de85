"""
Builtin experiment models: hierarchical linear and logistic regressions with a
quadratic time trend, and a turn-over (indirect response) model with constant
drug stimulation of the zero-order in-flux.

Each model carries a config with the true parameter values used to simulate
an experiment, and normal priors on the unconstrained scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import stats
from scipy.special import expit, gammaln, log_expit

from aggrefuse.model import (
    ExternalSummary,
    LocalDataset,
    ModelError,
    ParameterSpec,
    Transform,
    shift_parameters,
)

ID, LOG = Transform.IDENTITY, Transform.LOG


@dataclass(frozen=True)
class LinearModelConfig:
    """True values and design for the hierarchical linear experiment."""

    n_individuals: int = 50
    n_external: int = 200
    n_times: int = 13
    x_max: float = 1.0
    mu_alpha: tuple[float, ...] = (0.5, -0.2)
    sigma_alpha: tuple[float, ...] = (0.1, 0.1)
    beta: float = -0.1
    sigma_y: float = 0.05
    delta: tuple[float, ...] = (0.1, 0.1)
    prior_sd: float = 1.0


@dataclass(frozen=True)
class LogisticModelConfig:
    """True values and design for the hierarchical logistic experiment."""

    n_individuals: int = 50
    n_external: int = 200
    n_times: int = 13
    x_max: float = 1.0
    mu_alpha: tuple[float, ...] = (0.5, -0.2)
    sigma_alpha: tuple[float, ...] = (0.1, 0.1)
    beta: float = -0.1
    delta: tuple[float, ...] = (0.1, 0.1)
    prior_sd: float = 1.0
    # Binomial trials per cell.
    trials: int = 20


@dataclass(frozen=True)
class TurnoverModelConfig:
    """True values and design for the turn-over experiment; times in weeks."""

    n_placebo: int = 50
    n_treated: int = 50
    n_external: int = 50
    n_times: int = 13
    x_max: float = 52.0
    lalpha0: float = math.log(50.0)
    sigma_lalpha0: float = 0.1
    lalphas: float = math.log(42.0)
    sigma_lalphas: float = 0.15
    lkappa: float = math.log(42.0) - 2.0 * math.log(10.0)
    lemax: float = math.log(0.4)
    delta: float = 0.2
    sigma_y: float = 0.2
    prior_sd: float = 5.0


@dataclass(frozen=True)
class Experiment:
    """Simulated local data, the full external data and its averages."""

    local: LocalDataset
    external_full: LocalDataset
    external: ExternalSummary


class _NormalPriorModel:
    """Independent normal priors on φ and δ on the unconstrained scale."""

    parameter_spec: ParameterSpec
    n_alpha: int
    prior_mean: NDArray[np.float64]
    prior_sd: NDArray[np.float64]
    delta_prior_sd: float

    def log_prior(self, phi: NDArray) -> NDArray | float:
        return stats.norm.logpdf(phi, self.prior_mean, self.prior_sd).sum(axis=-1)

    def log_prior_delta(self, delta: NDArray, phi: NDArray | None = None) -> NDArray | float:
        return stats.norm.logpdf(delta, 0.0, self.delta_prior_sd).sum(axis=-1)

    def sample_prior_delta(self, n: int, rng: np.random.Generator) -> NDArray:
        return rng.normal(0.0, self.delta_prior_sd, (n, self.parameter_spec.dim_delta))

    def prior_variance(self) -> NDArray:
        return self.prior_sd**2


class _QuadraticRegression(_NormalPriorModel):
    """α_j ~ N(μ_α, diag σ_α²); linear predictor α_j1 + α_j2 x + β x²."""

    n_alpha = 2

    def __init__(self, config: LinearModelConfig | LogisticModelConfig, names, transforms):
        self.config = config
        self.parameter_spec = ParameterSpec(
            names=names,
            transforms=transforms,
            delta_names=("delta1", "delta2"),
            delta_target=(0, 1),
        )
        self.prior_mean = np.zeros(len(names))
        self.prior_sd = np.full(len(names), config.prior_sd)
        self.delta_prior_sd = config.prior_sd

    @property
    def design(self) -> NDArray[np.float64]:
        """Measurement times x_t."""
        return np.linspace(0.0, self.config.x_max, self.config.n_times)

    def local_arms(self) -> NDArray[np.int_]:
        """Arm indicators of the local cohort."""
        return np.zeros(self.config.n_individuals, dtype=int)

    external_arm = 0

    def n_external(self) -> int:
        """J′."""
        return self.config.n_external

    def true_delta(self) -> NDArray[np.float64]:
        """δ used to simulate the external cohort."""
        return np.asarray(self.config.delta, dtype=float)

    def log_individual_prior(self, alpha: NDArray, phi: NDArray) -> NDArray:
        return stats.norm.logpdf(alpha, phi[0:2], np.exp(phi[3:5])).sum(axis=1)

    def sample_individual(self, phi: NDArray, arms: NDArray, rng: np.random.Generator) -> NDArray:
        return phi[0:2] + np.exp(phi[3:5]) * rng.standard_normal((len(arms), 2))

    def linear_predictor(self, alpha: NDArray, phi: NDArray, x: NDArray) -> NDArray:
        """η_jt = α_j1 + α_j2 x_t + β x_t²."""
        return alpha[:, 0:1] + alpha[:, 1:2] * x + phi[2] * x**2


class LinearModel(_QuadraticRegression):
    """y_jt ~ N(α_j1 + α_j2 x_t + β x_t², σ_y²)."""

    def __init__(self, config: LinearModelConfig | None = None):
        super().__init__(
            config or LinearModelConfig(),
            names=("mu_alpha1", "mu_alpha2", "beta", "log_sigma_alpha1", "log_sigma_alpha2", "log_sigma_y"),
            transforms=(ID, ID, ID, LOG, LOG, LOG),
        )

    def true_phi(self) -> NDArray[np.float64]:
        """φ used to simulate the local cohort."""
        c = self.config
        return np.array([*c.mu_alpha, c.beta, *np.log(c.sigma_alpha), math.log(c.sigma_y)])

    def expected_response(self, alpha: NDArray, phi: NDArray, x: NDArray, arms: NDArray) -> NDArray:
        """E[y | α, φ]."""
        return self.linear_predictor(alpha, phi, x)

    def simulate_observations(self, alpha, phi, x, arms, rng):
        eta = self.linear_predictor(alpha, phi, x)
        return eta + math.exp(phi[5]) * rng.standard_normal(eta.shape)

    def log_likelihood(self, y, alpha, phi, x, arms):
        eta = self.linear_predictor(alpha, phi, x)
        return stats.norm.logpdf(y, eta, math.exp(phi[5])).sum(axis=1)


class LogisticModel(_QuadraticRegression):
    """y_jt ~ Binomial(trials, logit⁻¹(α_j1 + α_j2 x_t + β x_t²))."""

    def __init__(self, config: LogisticModelConfig | None = None):
        super().__init__(
            config or LogisticModelConfig(),
            names=("mu_alpha1", "mu_alpha2", "beta", "log_sigma_alpha1", "log_sigma_alpha2"),
            transforms=(ID, ID, ID, LOG, LOG),
        )
        if self.config.trials < 1:
            raise ModelError("trials must be positive")

    def true_phi(self) -> NDArray[np.float64]:
        """φ used to simulate the local cohort."""
        c = self.config
        return np.array([*c.mu_alpha, c.beta, *np.log(c.sigma_alpha)])

    def probability(self, alpha: NDArray, phi: NDArray, x: NDArray) -> NDArray:
        """Success probability per individual and time."""
        return expit(self.linear_predictor(alpha, phi, x))

    def expected_response(self, alpha, phi, x, arms):
        """E[y | α, φ]."""
        return self.config.trials * self.probability(alpha, phi, x)

    def simulate_observations(self, alpha, phi, x, arms, rng):
        return rng.binomial(self.config.trials, self.probability(alpha, phi, x))

    def log_likelihood(self, y, alpha, phi, x, arms):
        n = self.config.trials
        eta = self.linear_predictor(alpha, phi, x)
        log_choose = gammaln(n + 1) - gammaln(y + 1) - gammaln(n - y + 1)
        return (log_choose + y * log_expit(eta) + (n - y) * log_expit(-eta)).sum(axis=1)


def kinetic_rates(lss: ArrayLike, lkappa: float) -> tuple[NDArray, NDArray]:
    """(k_in, k_out) from log(k_in/k_out) and log(k_in k_out)."""
    lss = np.asarray(lss, dtype=float)
    return np.exp(0.5 * (lkappa + lss)), np.exp(0.5 * (lkappa - lss))


class TurnoverModel(_NormalPriorModel):
    """
    Turn-over response dR/dt = k_in (1 + Emax s) − k_out R with R(0) = R0,
    s = 1 for treated and 0 for placebo, so that

        R(t) = R_ss + (R0 − R_ss) exp(−k_out t),  R_ss = (k_in/k_out)(1 + Emax s).

    Individual parameters are α_j = (log R0_j, log(k_in/k_out)_j); observations
    are lognormal around R(x_t). δ shifts lEmax, so the external cohort (all
    treated, with an alternative drug) has Emax′ = Emax exp(δ).
    """

    n_alpha = 2
    external_arm = 1

    def __init__(self, config: TurnoverModelConfig | None = None):
        self.config = config or TurnoverModelConfig()
        self.parameter_spec = ParameterSpec(
            names=("lalpha0", "log_sigma_lalpha0", "lalphas", "log_sigma_lalphas", "lkappa", "lEmax", "log_sigma_y"),
            transforms=(ID, LOG, ID, LOG, ID, ID, LOG),
            delta_names=("delta",),
            delta_target=(5,),
        )
        log50, log01 = math.log(50.0), math.log(0.1)
        self.prior_mean = np.array([log50, log01, log50, log01, log50 - 2.0, log01, 0.0])
        self.prior_sd = np.full(7, self.config.prior_sd)
        self.delta_prior_sd = self.config.prior_sd

    @property
    def design(self) -> NDArray[np.float64]:
        """Measurement times x_t in weeks."""
        return np.linspace(0.0, self.config.x_max, self.config.n_times)

    def local_arms(self) -> NDArray[np.int_]:
        """Placebo patients first, then treated."""
        c = self.config
        return np.concatenate([np.zeros(c.n_placebo, dtype=int), np.ones(c.n_treated, dtype=int)])

    def n_external(self) -> int:
        """J′."""
        return self.config.n_external

    def true_phi(self) -> NDArray[np.float64]:
        """φ used to simulate the local cohort."""
        c = self.config
        return np.array([
            c.lalpha0, math.log(c.sigma_lalpha0), c.lalphas, math.log(c.sigma_lalphas),
            c.lkappa, c.lemax, math.log(c.sigma_y),
        ])

    def true_delta(self) -> NDArray[np.float64]:
        """δ used to simulate the external cohort."""
        return np.array([self.config.delta])

    def log_individual_prior(self, alpha, phi):
        loc = np.array([phi[0], phi[2]])
        scale = np.exp([phi[1], phi[3]])
        return stats.norm.logpdf(alpha, loc, scale).sum(axis=1)

    def sample_individual(self, phi, arms, rng):
        loc = np.array([phi[0], phi[2]])
        scale = np.exp([phi[1], phi[3]])
        return loc + scale * rng.standard_normal((len(arms), 2))

    def response(self, alpha: NDArray, phi: NDArray, x: NDArray, arms: NDArray) -> NDArray:
        """R_j(x_t) for every individual and time."""
        r0 = np.exp(alpha[:, 0:1])
        _, k_out = kinetic_rates(alpha[:, 1:2], phi[4])
        steady = np.exp(alpha[:, 1:2]) * (1.0 + math.exp(phi[5]) * np.asarray(arms)[:, None])
        return steady + (r0 - steady) * np.exp(-k_out * x)

    def expected_response(self, alpha, phi, x, arms):
        """E[y | α, φ] = R exp(σ_y²/2)."""
        return self.response(alpha, phi, x, arms) * math.exp(0.5 * math.exp(2.0 * phi[6]))

    def simulate_observations(self, alpha, phi, x, arms, rng):
        log_r = np.log(self.response(alpha, phi, x, arms))
        return np.exp(log_r + math.exp(phi[6]) * rng.standard_normal(log_r.shape))

    def log_likelihood(self, y, alpha, phi, x, arms):
        log_y = np.log(y)
        log_r = np.log(self.response(alpha, phi, x, arms))
        return (stats.norm.logpdf(log_y, log_r, math.exp(phi[6])) - log_y).sum(axis=1)


BuiltinModel = Union[LinearModel, LogisticModel, TurnoverModel]

BUILTIN_MODELS = {
    "linear": (LinearModel, LinearModelConfig),
    "logistic": (LogisticModel, LogisticModelConfig),
    "turnover": (TurnoverModel, TurnoverModelConfig),
}


def linear_model(config: LinearModelConfig | None = None) -> LinearModel:
    """The hierarchical linear model."""
    return LinearModel(config)


def logistic_model(config: LogisticModelConfig | None = None) -> LogisticModel:
    """The hierarchical logistic model."""
    return LogisticModel(config)


def turnover_model(config: TurnoverModelConfig | None = None) -> TurnoverModel:
    """The turn-over model."""
    return TurnoverModel(config)


def simulate_experiment(model: BuiltinModel, seed: int) -> Experiment:
    """
    Simulate local data at the true φ and external data at φ′ = φ + δ.

    The full external dataset is kept alongside its averages so that the
    complete-data reference fit can be computed.
    """
    rng = np.random.default_rng(seed)
    x = model.design
    phi = model.true_phi()

    arms = model.local_arms()
    alpha = model.sample_individual(phi, arms, rng)
    local = LocalDataset(model.simulate_observations(alpha, phi, x, arms, rng), x, arms)

    phi_prime = shift_parameters(phi, model.true_delta(), model.parameter_spec)
    ext_arms = np.full(model.n_external(), model.external_arm, dtype=int)
    ext_alpha = model.sample_individual(phi_prime, ext_arms, rng)
    external_full = LocalDataset(
        model.simulate_observations(ext_alpha, phi_prime, x, ext_arms, rng), x, ext_arms
    )
    return Experiment(local, external_full, ExternalSummary.from_full_data(external_full))
