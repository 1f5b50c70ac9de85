"""Tests for the psis module."""

import math

import numpy as np
import pytest
from scipy import stats

from aggrefuse.psis import (
    ImportanceRatios,
    PSISError,
    Regime,
    efficiency,
    fit_generalized_pareto,
    importance_resample,
    log_efficiency_ratios,
    pareto_smooth,
    tail_length,
)


class TestRegime:
    """Test the k-hat classification."""

    @pytest.mark.parametrize(
        "k_hat, regime",
        [
            (-0.2, Regime.FAST_CONVERGENCE),
            (0.49, Regime.FAST_CONVERGENCE),
            (0.5, Regime.SLOW_CONVERGENCE),
            (0.99, Regime.SLOW_CONVERGENCE),
            (1.0, Regime.UNRELIABLE),
            (math.inf, Regime.UNRELIABLE),
            (math.nan, Regime.UNRELIABLE),
        ],
    )
    def test_from_k_hat(self, k_hat, regime) -> None:
        """Boundaries at 1/2 and 1."""
        assert Regime.from_k_hat(k_hat) is regime


class TestImportanceRatios:
    """Test ImportanceRatios validation."""

    def test_non_finite_names_draw(self) -> None:
        """The first non-finite draw is reported."""
        with pytest.raises(PSISError, match="draw 3"):
            ImportanceRatios(np.array([0.0, 1.0, 2.0, np.inf, np.nan]))

    def test_too_few(self) -> None:
        """A single ratio is rejected."""
        with pytest.raises(PSISError):
            ImportanceRatios(np.array([0.0]))


class TestFitGeneralizedPareto:
    """Test the generalized Pareto tail fit."""

    @pytest.mark.parametrize("k", [0.0, 0.3, 0.7])
    def test_recovers_shape(self, k) -> None:
        """k-hat lies within 0.15 of the true shape for 4000 points."""
        sample = stats.genpareto.rvs(k, scale=2.0, size=4000, random_state=np.random.default_rng(11))
        k_hat, sigma = fit_generalized_pareto(sample)
        assert abs(k_hat - k) < 0.15
        assert sigma == pytest.approx(2.0, rel=0.2)

    def test_short_tail(self) -> None:
        """Fewer than five points cannot be fitted."""
        with pytest.raises(PSISError, match="too short"):
            fit_generalized_pareto(np.array([0.1, 0.2, 0.3]))

    def test_constant_tail(self) -> None:
        """A constant tail has no shape."""
        with pytest.raises(PSISError, match="constant"):
            fit_generalized_pareto(np.full(10, 0.5))

    def test_ties_at_zero(self) -> None:
        """Exceedances tied at zero are fitted together with the positive ones."""
        sample = np.concatenate([np.zeros(19), [1.0]])
        k_hat, sigma = fit_generalized_pareto(sample)
        assert np.isfinite(k_hat)
        assert sigma > 0

    def test_negative_tail(self) -> None:
        """Exceedances cannot be negative."""
        with pytest.raises(PSISError, match="nonnegative"):
            fit_generalized_pareto(np.array([-1.0, 0.2, 0.3, 0.4, 0.5]))


class TestParetoSmooth:
    """Test pareto_smooth."""

    def test_equal_ratios(self) -> None:
        """Equal ratios give uniform weights and k-hat = -inf."""
        sw = pareto_smooth(ImportanceRatios(np.full(100, 2.5)))
        np.testing.assert_allclose(sw.weights, np.full(100, 0.01))
        assert sw.k_hat == -math.inf
        assert sw.regime is Regime.FAST_CONVERGENCE

    def test_too_few_draws(self) -> None:
        """Below 25 draws the raw ratios are only normalized."""
        log_r = np.log(np.arange(1.0, 11.0))
        sw = pareto_smooth(ImportanceRatios(log_r))
        np.testing.assert_allclose(sw.weights, np.arange(1.0, 11.0) / 55.0)
        assert math.isnan(sw.k_hat)
        assert sw.regime is Regime.UNRELIABLE

    def test_heavy_tail_is_slow(self) -> None:
        """Ratios with a GPD(0.7) tail land in the slow-convergence regime."""
        r = 1.0 + stats.genpareto.rvs(0.7, size=500_000, random_state=np.random.default_rng(5))
        sw = pareto_smooth(ImportanceRatios(np.log(r)))
        assert 0.5 <= sw.k_hat < 1.0
        assert sw.regime is Regime.SLOW_CONVERGENCE

    def test_outlier_is_damped(self) -> None:
        """One ratio of 1e6 among exactly equal ratios loses weight after smoothing."""
        r = np.ones(100)
        r[17] = 1e6
        sw = pareto_smooth(ImportanceRatios(np.log(r)))
        raw_max = r.max() / r.sum()
        assert sw.weights.max() < raw_max
        assert sw.weights.sum() == pytest.approx(1.0)
        assert np.argmax(sw.weights) == 17
        assert np.isfinite(sw.k_hat)

    def test_tail_tied_with_cutoff(self) -> None:
        """A tail equal to the largest remaining ratio is left as it is."""
        r = np.concatenate([np.ones(50), np.full(50, 2.0)])
        sw = pareto_smooth(ImportanceRatios(np.log(r)))
        np.testing.assert_allclose(sw.weights, r / r.sum())
        assert sw.k_hat == -math.inf
        assert sw.regime is Regime.FAST_CONVERGENCE

    def test_weights_normalized_and_capped(self) -> None:
        """Smoothed weights sum to one and never exceed the raw maximum ratio."""
        log_r = np.random.default_rng(8).standard_normal(1000) * 2.0
        sw = pareto_smooth(ImportanceRatios(log_r))
        assert sw.weights.sum() == pytest.approx(1.0)
        raw = np.exp(log_r - log_r.max())
        # Rescale the smoothed weights back to the raw scale.
        smoothed = sw.weights / sw.weights[np.argmin(log_r)] * raw[np.argmin(log_r)]
        assert smoothed.max() <= 1.0 + 1e-12

    def test_shift_invariant(self) -> None:
        """Adding a constant to every log ratio does not change the weights."""
        log_r = np.random.default_rng(9).standard_normal(200)
        a = pareto_smooth(ImportanceRatios(log_r))
        b = pareto_smooth(ImportanceRatios(log_r + 1234.5))
        np.testing.assert_allclose(a.weights, b.weights, rtol=1e-9)
        assert a.k_hat == pytest.approx(b.k_hat, abs=1e-9)


class TestEfficiency:
    """Test efficiency and tail_length."""

    def test_equal(self) -> None:
        """Equal ratios are fully efficient."""
        assert efficiency(np.full(100, 3.0)) == pytest.approx(1.0, abs=1e-12)

    def test_single_dominant(self) -> None:
        """One ratio carrying all the weight gives 1/S."""
        r = np.full(100, 1e-12)
        r[0] = 1.0
        assert efficiency(r) == pytest.approx(0.01, abs=1e-6)

    def test_hand_example(self) -> None:
        """(1, 1, 2) gives 3/3.375."""
        assert efficiency(np.array([1.0, 1.0, 2.0])) == pytest.approx(3.0 / 3.375, abs=1e-12)

    def test_scale_invariant(self) -> None:
        """Scaling the ratios does not change efficiency."""
        r = np.random.default_rng(1).uniform(size=50)
        assert efficiency(r) == pytest.approx(efficiency(7.0 * r), abs=1e-12)

    def test_from_logs(self) -> None:
        """Log ratios far from zero do not overflow."""
        log_r = np.array([1000.0, 1000.0, 1000.0 + math.log(2.0)])
        assert log_efficiency_ratios(log_r) == pytest.approx(3.0 / 3.375, abs=1e-12)

    def test_all_zero(self) -> None:
        """All-zero ratios are an error."""
        with pytest.raises(PSISError):
            efficiency(np.zeros(5))

    @pytest.mark.parametrize("n, m", [(100, 20), (4000, 190), (25, 5)])
    def test_tail_length(self, n, m) -> None:
        """M = ceil(min(0.2 S, 3 sqrt(S)))."""
        assert tail_length(n) == m


class TestImportanceResample:
    """Test importance_resample."""

    def test_follows_weights(self) -> None:
        """Zero-weight rows are never drawn."""
        samples = np.arange(10.0).reshape(5, 2)
        weights = np.array([0.0, 0.5, 0.0, 0.5, 0.0])
        out = importance_resample(samples, weights, 200, np.random.default_rng(0))
        assert out.shape == (200, 2)
        assert set(out[:, 0]) <= {2.0, 6.0}
