"""Shared fixtures: a small non-hierarchical model with closed-form answers."""

import numpy as np
import pytest
from scipy import stats

from aggrefuse.model import ExternalSummary, LocalDataset, ParameterSpec, Transform

# pylint: disable=redefined-outer-name


class NormalMeanModel:
    """
    y_jt ~ N(φ, 1) with no individual-level parameters; δ shifts φ.

    Priors are φ ~ N(0, 1) and δ ~ N(0, 1).
    """

    n_alpha = 0

    def __init__(self) -> None:
        self.parameter_spec = ParameterSpec(
            names=("mu",), transforms=(Transform.IDENTITY,), delta_names=("delta",), delta_target=(0,)
        )

    def log_prior(self, phi):
        return stats.norm.logpdf(phi).sum(axis=-1)

    def log_prior_delta(self, delta, phi=None):
        return stats.norm.logpdf(delta).sum(axis=-1)

    def sample_prior_delta(self, n, rng):
        return rng.standard_normal((n, 1))

    def prior_variance(self):
        return np.ones(1)

    def log_individual_prior(self, alpha, phi):
        return np.zeros(alpha.shape[0])

    def sample_individual(self, phi, arms, rng):
        return np.empty((len(arms), 0))

    def simulate_observations(self, alpha, phi, x, arms, rng):
        return phi[0] + rng.standard_normal((len(arms), np.size(x)))

    def log_likelihood(self, y, alpha, phi, x, arms):
        return stats.norm.logpdf(y, phi[0], 1.0).sum(axis=1)


@pytest.fixture
def normal_model() -> NormalMeanModel:
    """The normal-mean model."""
    return NormalMeanModel()


@pytest.fixture
def single_observation() -> LocalDataset:
    """One individual observed once at y = 1."""
    return LocalDataset(np.array([[1.0]]), np.array([0.0]))


@pytest.fixture
def normal_external() -> ExternalSummary:
    """Average of 50 individuals over two time points."""
    return ExternalSummary(np.array([0.2, 0.3]), 50, np.array([0.0, 1.0]))
