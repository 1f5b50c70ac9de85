"""Tests for the algorithm module."""

import math
from dataclasses import replace

import numpy as np
import pytest

import aggrefuse.algorithm
from aggrefuse.algorithm import (
    AlgorithmError,
    RunTrace,
    Schedule,
    StepMode,
    StepRecord,
    check_convergence,
    initialize_pseudo_priors,
    resample_update_delta,
    run_algorithm,
    run_basic,
)
from aggrefuse.ep import PseudoPriorPair
from aggrefuse.gaussian import GaussianApprox, WeightCollapseError, is_positive_definite
from aggrefuse.mcmc import SamplerConfig
from aggrefuse.psis import Regime, SmoothedWeights

# pylint: disable=redefined-outer-name


@pytest.fixture
def tiny_schedule() -> Schedule:
    """Two outer steps of three inner steps on small samples."""
    return Schedule(
        outer_steps=2,
        inner_steps=3,
        initial_mcmc_iterations=50,
        j_tilde=200,
        resample_warmup_steps=2,
        n_chains=2,
    )


@pytest.fixture
def init(normal_model) -> PseudoPriorPair:
    """Pseudo-priors drawn from a fixed seed."""
    return initialize_pseudo_priors(normal_model.parameter_spec, np.random.default_rng(0))


def _smoothed(w) -> SmoothedWeights:
    w = np.asarray(w, dtype=float)
    return SmoothedWeights(w / w.sum(), 0.3, Regime.FAST_CONVERGENCE)


def _trace(run_id: int, means: np.ndarray, k_hat: float = 0.3, schedule: Schedule = Schedule()) -> RunTrace:
    records = [
        StepRecord(
            step=i,
            outer=0,
            inner=i,
            mean=np.atleast_1d(m),
            sd=np.ones(np.size(m)),
            k_hat=k_hat,
            efficiency=0.5,
            relaxation=0,
            rhat_mcmc=np.ones(1),
            mode=StepMode.WEIGHTED,
        )
        for i, m in enumerate(means)
    ]
    return RunTrace(run_id, run_id, ("mu", "delta"), 1, schedule, records)


class TestSchedule:
    """Test the schedule growth and validation."""

    def test_mcmc_growth(self) -> None:
        """Iterations grow by √2 per outer step."""
        schedule = Schedule()
        assert [schedule.mcmc_iterations(t) for t in range(4)] == [100, 141, 200, 283]

    def test_n_floor(self) -> None:
        """The variance floor starts at 2 and grows by √2."""
        schedule = Schedule()
        assert schedule.n_floor(0) == pytest.approx(2.0)
        assert schedule.n_floor(2) == pytest.approx(4.0)

    def test_constant_by_default(self) -> None:
        """Inner steps and J̃ do not grow unless asked."""
        schedule = Schedule()
        assert schedule.inner_steps_at(5) == 10
        assert schedule.j_tilde_at(5) == 1000
        assert Schedule(jtilde_growth=2.0).j_tilde_at(3) == 8000

    @pytest.mark.parametrize(
        "kwargs",
        [{"outer_steps": 0}, {"initial_mcmc_iterations": 10}, {"mcmc_growth": 0.5}, {"j_tilde": 0}],
    )
    def test_invalid(self, kwargs) -> None:
        """Non-positive counts and shrinking growth are rejected."""
        with pytest.raises(AlgorithmError):
            Schedule(**kwargs)


class TestInitializePseudoPriors:
    """Test initialize_pseudo_priors."""

    def test_identity_covariance(self, normal_model) -> None:
        """Both pseudo-priors start with unit covariance."""
        pair = initialize_pseudo_priors(normal_model.parameter_spec, np.random.default_rng(1))
        np.testing.assert_array_equal(pair.g_phi.cov, np.eye(1))
        np.testing.assert_array_equal(pair.g_delta.cov, np.eye(1))

    def test_seeded(self, normal_model) -> None:
        """Same seed, same means; the center shifts φ only."""
        spec = normal_model.parameter_spec
        a = initialize_pseudo_priors(spec, np.random.default_rng(2))
        b = initialize_pseudo_priors(spec, np.random.default_rng(2), center=[10.0])
        np.testing.assert_allclose(b.g_phi.mean, a.g_phi.mean + 10.0)
        np.testing.assert_array_equal(b.g_delta.mean, a.g_delta.mean)

    def test_bad_center(self, normal_model) -> None:
        """The center must match φ."""
        with pytest.raises(AlgorithmError, match="center"):
            initialize_pseudo_priors(normal_model.parameter_spec, np.random.default_rng(0), center=[0.0, 0.0])


class TestResampleUpdateDelta:
    """Test the resampling update of g(δ)."""

    def test_dominant_weight_keeps_spread(self) -> None:
        """One dominant weight still leaves a non-degenerate g(δ)."""
        w = np.full(100, 1e-4)
        w[0] = 0.99
        g = resample_update_delta(np.arange(100.0), _smoothed(w), 50, np.random.default_rng(3))
        assert is_positive_definite(g.cov)
        assert g.cov[0, 0] > 1.0

    def test_resample_size(self) -> None:
        """m must be below the number of draws."""
        with pytest.raises(AlgorithmError, match="smaller"):
            resample_update_delta(np.arange(4.0), _smoothed(np.ones(4)), 4, np.random.default_rng(0))

    def test_single_positive_weight(self) -> None:
        """A single positive weight cannot be resampled."""
        with pytest.raises(WeightCollapseError):
            resample_update_delta(np.arange(10.0), _smoothed([1.0] + [0.0] * 9), 5, np.random.default_rng(0))


class TestRunAlgorithm:
    """Test run_algorithm on the normal-mean model."""

    def test_structure(self, mocker, normal_model, single_observation, normal_external, tiny_schedule, init) -> None:
        """One MCMC fit per outer step, one record per inner step."""
        spy = mocker.spy(aggrefuse.algorithm, "sample_pseudo_posterior")
        trace = run_algorithm(normal_model, single_observation, normal_external, tiny_schedule, init, seed=4)
        assert spy.call_count == 2
        assert [call.args[3].n_iterations for call in spy.call_args_list] == [50, 71]
        assert trace.n_steps == 6
        assert [r.mode for r in trace.records] == [StepMode.RESAMPLE] * 2 + [StepMode.WEIGHTED] * 4
        assert [(r.outer, r.inner) for r in trace.records[2:4]] == [(0, 2), (1, 0)]
        for record in trace.records:
            assert 0.0 < record.efficiency <= 1.0
            assert record.mean.shape == (2,)
            assert np.all(record.sd > 0)
        assert trace.final_draws.shape == (142, 2)
        assert trace.final_weights.sum() == pytest.approx(1.0)
        assert trace.pseudo_priors is not None

    def test_deterministic(self, normal_model, single_observation, normal_external, tiny_schedule, init) -> None:
        """Same seed, same trace, whatever the thread count."""
        a = run_algorithm(normal_model, single_observation, normal_external, tiny_schedule, init, seed=5)
        threaded = replace(tiny_schedule, threads=2)
        b = run_algorithm(normal_model, single_observation, normal_external, threaded, init, seed=5)
        np.testing.assert_array_equal(a.means(), b.means())
        np.testing.assert_array_equal(a.k_hats(), b.k_hats())

    def test_single_chain(self, normal_model, single_observation, normal_external, init) -> None:
        """With one chain the MCMC R-hat is not available."""
        schedule = Schedule(outer_steps=1, inner_steps=1, initial_mcmc_iterations=50, j_tilde=100, n_chains=1)
        trace = run_algorithm(normal_model, single_observation, normal_external, schedule, init, seed=0)
        assert math.isnan(trace.final.rhat_mcmc[0])

    def test_weight_collapse(self, mocker, normal_model, single_observation, normal_external, init) -> None:
        """A collapse raises with the partial trace attached."""
        w = np.zeros(100)
        w[7] = 1.0
        mocker.patch("aggrefuse.algorithm.pareto_smooth", return_value=_smoothed(w))
        schedule = Schedule(
            outer_steps=1, inner_steps=2, initial_mcmc_iterations=50, j_tilde=50, n_chains=2, resample_warmup_steps=0
        )
        with pytest.raises(AlgorithmError, match="collapsed") as excinfo:
            run_algorithm(normal_model, single_observation, normal_external, schedule, init, seed=0)
        assert excinfo.value.trace is not None
        assert excinfo.value.trace.n_steps == 0

    def test_mismatched_init(self, normal_model, single_observation, normal_external, tiny_schedule) -> None:
        """The pseudo-priors must match the model."""
        bad = PseudoPriorPair(GaussianApprox.standard([0.0, 0.0]), GaussianApprox.standard([0.0]))
        with pytest.raises(AlgorithmError, match="do not match"):
            run_algorithm(normal_model, single_observation, normal_external, tiny_schedule, bad, seed=0)

    def test_matches_exact_posterior(self, normal_model, single_observation, normal_external, init) -> None:
        """The final weighted means land within half a posterior sd of the closed form."""
        # Prior I on (mu, delta), y = 1 on mu, and two averages of 50 on mu + delta.
        rows = np.array([[1.0, 0.0], [1.0, 1.0], [1.0, 1.0]])
        precisions = np.array([1.0, 50.0, 50.0])
        values = np.array([1.0, 0.2, 0.3])
        posterior_precision = np.eye(2) + rows.T @ (precisions[:, None] * rows)
        cov = np.linalg.inv(posterior_precision)
        mean = cov @ rows.T @ (precisions * values)
        schedule = Schedule(
            outer_steps=6, inner_steps=5, initial_mcmc_iterations=300, j_tilde=500, resample_warmup_steps=10
        )
        trace = run_algorithm(normal_model, single_observation, normal_external, schedule, init, seed=11)
        assert np.all(np.abs(trace.final.mean - mean) < 0.5 * np.sqrt(np.diag(cov)))


class TestCheckConvergence:
    """Test the cross-run convergence check."""

    def test_identical_runs(self) -> None:
        """Identical traces give R-hat 1 and converge."""
        means = np.column_stack([np.linspace(0.0, 1.0, 10), np.linspace(1.0, 0.0, 10)])
        report = check_convergence([_trace(1, means), _trace(2, means)])
        np.testing.assert_allclose(report.rhat, 1.0)
        assert report.converged
        assert report.names == ("mu", "delta")

    def test_offset_run(self) -> None:
        """A run far from the others is not converged."""
        rng = np.random.default_rng(6)
        means = rng.normal(0.0, 0.01, (10, 2))
        report = check_convergence([_trace(1, means), _trace(2, means + 0.001), _trace(3, means + 5.0)])
        assert report.rhat.max() > 1.1
        assert not report.converged

    def test_final_k_hat(self) -> None:
        """A final k̂ of 1 or more fails the verdict; so does NaN."""
        means = np.zeros((10, 2))
        assert not check_convergence([_trace(1, means), _trace(2, means, k_hat=1.2)]).converged
        assert not check_convergence([_trace(1, means), _trace(2, means, k_hat=math.nan)]).converged

    def test_mismatched_schedule(self) -> None:
        """Runs must share a schedule."""
        means = np.zeros((10, 2))
        with pytest.raises(AlgorithmError, match="schedule"):
            check_convergence([_trace(1, means), _trace(2, means, schedule=Schedule(outer_steps=3))])

    def test_needs_two_runs(self) -> None:
        """One run cannot be checked."""
        with pytest.raises(AlgorithmError, match="two runs"):
            check_convergence([_trace(1, np.zeros((10, 2)))])


class TestRunBasic:
    """Test the one-pass importance sampler."""

    def test_normal_mean(self, mocker, normal_model, single_observation, normal_external) -> None:
        """The weighted mean of φ + δ moves to the external averages."""
        spy = mocker.spy(aggrefuse.algorithm, "sample_local_posterior")
        result = run_basic(
            normal_model,
            single_observation,
            normal_external,
            GaussianApprox.standard([0.0]),
            SamplerConfig(n_iterations=500, seed=0),
            j_tilde=200,
            seed=7,
        )
        assert spy.call_count == 1
        assert result.names == ("mu", "delta")
        assert result.draws.shape == (2000, 2)
        assert result.weights.weights.sum() == pytest.approx(1.0)
        assert 0.0 < result.efficiency <= 1.0
        assert result.mean.sum() == pytest.approx(0.25, abs=0.1)
