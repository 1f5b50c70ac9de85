"""Tests for the mcmc module."""

import math

import numpy as np
import pytest
from scipy import stats

from aggrefuse.gaussian import GaussianApprox, mvn_logpdf
from aggrefuse.mcmc import (
    ParameterDraws,
    SamplerConfig,
    SamplerError,
    potential_scale_reduction,
    rhat,
    sample_local_posterior,
    sample_pseudo_posterior,
    sample_target,
)
from aggrefuse.model import LocalDataset
from aggrefuse.models import LinearModel, simulate_experiment

# pylint: disable=redefined-outer-name


class CorrelatedGaussian:
    """A 2-d Gaussian target with no individual-level blocks."""

    names = ("a", "b")
    n_alpha = 0
    n_individuals = 0

    def __init__(self, rho: float) -> None:
        self.g = GaussianApprox(np.zeros(2), np.array([[1.0, rho], [rho, 1.0]]))

    def log_global(self, theta):
        return float(mvn_logpdf(theta, self.g))

    def log_local(self, alpha, theta):
        return np.zeros(0)

    def initial_global(self, rng):
        return rng.standard_normal(2)

    def initial_local(self, theta, rng):
        return np.empty((0, 0))


class NowhereFinite(CorrelatedGaussian):
    """A target whose density is zero everywhere."""

    def log_global(self, theta):
        return -math.inf


def _draws(chains: np.ndarray) -> ParameterDraws:
    m, n = chains.shape[:2]
    return ParameterDraws(
        chains.reshape(m * n, -1), np.repeat(np.arange(m), n), ("x",), np.zeros(m)
    )


class TestSamplerConfig:
    """Test SamplerConfig validation."""

    def test_minimum_iterations(self) -> None:
        """Fewer than 50 iterations is an error."""
        with pytest.raises(SamplerError, match="at least 50"):
            SamplerConfig(n_iterations=10)

    def test_warmup_length(self) -> None:
        """A warmup fraction of one half means as many warmup as kept iterations."""
        assert SamplerConfig(n_iterations=400).n_warmup == 400


class TestSamplePseudoPosterior:
    """Test sampling g(φ) times the local likelihood."""

    def test_conjugate_normal(self, normal_model, single_observation) -> None:
        """N(0, 1) prior and one unit-noise observation y = 1 give N(0.5, 0.5)."""
        cfg = SamplerConfig(n_chains=4, n_iterations=2000, seed=1)
        draws = sample_pseudo_posterior(normal_model, GaussianApprox.standard([0.0]), single_observation, cfg)
        assert draws.draws.shape == (8000, 1)
        assert draws.draws.mean() == pytest.approx(0.5, abs=0.06)
        assert draws.draws.std() == pytest.approx(math.sqrt(0.5), abs=0.06)

    def test_prior_recovery(self, normal_model) -> None:
        """With no data the draws follow the pseudo-prior."""
        empty = LocalDataset(np.zeros((0, 1)), np.array([0.0]))
        prior = GaussianApprox([1.0], [[4.0]])
        draws = sample_pseudo_posterior(normal_model, prior, empty, SamplerConfig(n_iterations=2000, seed=2))
        assert draws.draws.mean() == pytest.approx(1.0, abs=0.2)
        assert draws.draws.std() == pytest.approx(2.0, abs=0.2)

    def test_deterministic(self, normal_model, single_observation) -> None:
        """Same seed, same draws, whatever the thread count."""
        prior = GaussianApprox.standard([0.0])
        a = sample_pseudo_posterior(normal_model, prior, single_observation, SamplerConfig(n_iterations=100, seed=5))
        b = sample_pseudo_posterior(
            normal_model, prior, single_observation, SamplerConfig(n_iterations=100, seed=5, threads=3)
        )
        np.testing.assert_array_equal(a.draws, b.draws)
        np.testing.assert_array_equal(a.chain_ids, np.repeat(np.arange(4), 100))

    def test_dimension_mismatch(self, normal_model, single_observation) -> None:
        """The pseudo-prior must match φ."""
        with pytest.raises(SamplerError, match="dimension"):
            sample_pseudo_posterior(
                normal_model, GaussianApprox.standard([0.0, 0.0]), single_observation, SamplerConfig()
            )

    def test_hierarchical_linear_mixes(self) -> None:
        """Chains on the linear model agree."""
        model = LinearModel()
        experiment = simulate_experiment(model, seed=0)
        prior = GaussianApprox(model.true_phi(), np.eye(6))
        draws = sample_pseudo_posterior(model, prior, experiment.local, SamplerConfig(n_iterations=1000, seed=3))
        assert np.all(rhat(draws) < 1.1)
        np.testing.assert_allclose(draws.draws.mean(axis=0)[:3], model.true_phi()[:3], atol=0.15)


class TestSampleTarget:
    """Test the sampler on generic targets."""

    def test_correlated_gaussian(self) -> None:
        """Marginals of a correlated Gaussian are reproduced at an adapted acceptance rate."""
        draws = sample_target(CorrelatedGaussian(0.8), SamplerConfig(n_chains=4, n_iterations=2000, seed=7))
        for i in range(2):
            assert stats.kstest(draws.draws[:, i], "norm").statistic < 0.05
        assert np.corrcoef(draws.draws.T)[0, 1] == pytest.approx(0.8, abs=0.05)
        assert draws.acceptance.shape == (4,)
        assert np.all((draws.acceptance >= 0.1) & (draws.acceptance <= 0.5))

    def test_non_finite_start(self) -> None:
        """A target that is nowhere finite fails in the phi block."""
        with pytest.raises(SamplerError, match="phi block"):
            sample_target(NowhereFinite(0.0), SamplerConfig(n_chains=1, n_iterations=50))

    def test_local_posterior(self, normal_model, single_observation) -> None:
        """The local posterior uses the model prior, not the start."""
        start = GaussianApprox([5.0], [[0.01]])
        draws = sample_local_posterior(
            normal_model, single_observation, start, SamplerConfig(n_iterations=2000, seed=4)
        )
        assert draws.draws.mean() == pytest.approx(0.5, abs=0.06)


class TestRhat:
    """Test the split-chain R-hat."""

    def test_identical_chains(self) -> None:
        """Chains made of the same draws give 1."""
        x = np.random.default_rng(0).standard_normal(50)
        chain = np.concatenate([x, x])
        r = rhat(_draws(np.stack([chain, chain])[:, :, None]))
        assert r[0] == pytest.approx(1.0, abs=1e-6)

    def test_offset_chains(self) -> None:
        """Chains 10 sd apart give R-hat above 2."""
        rng = np.random.default_rng(1)
        chains = np.stack([rng.standard_normal(500), 10.0 + rng.standard_normal(500)])[:, :, None]
        assert rhat(_draws(chains))[0] > 2.0

    def test_same_distribution(self) -> None:
        """Independent chains from one distribution give R-hat near 1."""
        chains = np.random.default_rng(2).standard_normal((4, 5000, 1))
        assert 1.0 <= rhat(_draws(chains))[0] <= 1.02

    def test_single_chain(self) -> None:
        """One chain is an error."""
        with pytest.raises(SamplerError, match="two chains"):
            rhat(_draws(np.zeros((1, 100, 1))))

    def test_constant_chains(self) -> None:
        """Zero variance everywhere gives 1; distinct constants give inf."""
        assert potential_scale_reduction(np.zeros((3, 20)))[0] == 1.0
        chains = np.stack([np.zeros(20), np.ones(20)])
        assert potential_scale_reduction(chains)[0] == math.inf
