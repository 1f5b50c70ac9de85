"""
Main module for aggrefuse. Simulates an experiment for a builtin model, runs
the fit several times from different pseudo-priors, and writes plot-ready
CSV traces, summaries and reference fits.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import logging
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
from typing_extensions import NoReturn

from aggrefuse.aggregate import AggregateError
from aggrefuse.algorithm import (
    INIT_MEAN_SD,
    AlgorithmError,
    RunTrace,
    Schedule,
    check_convergence,
    initialize_pseudo_priors,
    run_algorithm,
    run_basic,
)
from aggrefuse.config import ConfigError, load_config, route_overrides, threads_from_env
from aggrefuse.ep import EPError, Relaxation
from aggrefuse.gaussian import GaussianApprox, GaussianError
from aggrefuse.mcmc import SamplerConfig, SamplerError
from aggrefuse.model import ModelError
from aggrefuse.models import BUILTIN_MODELS, BuiltinModel, Experiment, simulate_experiment
from aggrefuse.oracle import OracleConfig, OracleError, PosteriorSummary, fit_blue, fit_green, fit_red
from aggrefuse.psis import PSISError, importance_resample
from aggrefuse import report

logger = logging.getLogger("aggrefuse")

# Exit codes:
EXIT_CONVERGED = 0
EXIT_ERROR = 1
# Finished, but the verdict says the results should not be trusted.
EXIT_UNCONVERGED = 2

DEFAULT_OUT = "aggrefuse-out"
BASIC_ITERATIONS = 1000

FAILURES = (
    AggregateError,
    AlgorithmError,
    ConfigError,
    EPError,
    GaussianError,
    ModelError,
    OracleError,
    PSISError,
    SamplerError,
    OSError,
)


class UsageError(Exception):
    """Exception raised for invalid command-line usage."""

    def __init__(self, message: str) -> None:
        self.message = message
        super().__init__(self.message)


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2, which is reserved for unconverged runs.
    def error(self, message: str) -> NoReturn:
        raise UsageError(message)


@dataclass(frozen=True)
class Settings:
    """Resolved configuration for one invocation."""

    model_name: str
    model: BuiltinModel
    schedule: Schedule
    oracle: OracleConfig


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", choices=sorted(BUILTIN_MODELS), default="linear")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path(DEFAULT_OUT))
    p.add_argument("--config", type=Path, help="key = value file; flags take precedence")
    p.add_argument("--jtilde", type=int, help="simulated individuals per draw")
    p.add_argument("--verbose", action="store_true", help="debug logging")


def build_parser() -> argparse.ArgumentParser:
    """The aggrefuse argument parser."""
    parser = _Parser(prog="aggrefuse", description="Fuse averaged external data into a hierarchical fit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="iterative fit, several runs")
    _add_common(run)
    run.add_argument("--runs", type=int)
    run.add_argument("--outer", type=int, help="outer steps")
    run.add_argument("--inner", type=int, help="inner steps per outer step")
    run.add_argument("--mcmc-init-iters", type=int)
    run.add_argument("--warmup-resample-steps", type=int)
    run.add_argument("--relaxation", choices=[r.value for r in Relaxation])
    run.add_argument("--resample-draws", type=int, help="write this many resampled draws per run")
    run.add_argument("--no-references", action="store_true", help="skip the reference fits")
    run.add_argument("--oracle-iters", type=int)

    oracle = sub.add_parser("oracle", help="reference fits only")
    _add_common(oracle)
    oracle.add_argument("--which", choices=["red", "green", "blue", "all"], default="all")
    oracle.add_argument("--oracle-iters", type=int)

    basic = sub.add_parser("basic", help="one-pass importance sampler")
    _add_common(basic)
    basic.add_argument("--mcmc-init-iters", type=int, help="iterations per chain")
    basic.add_argument("--resample-draws", type=int)
    return parser


def _flag_overrides(args: argparse.Namespace) -> dict[str, dict[str, Any]]:
    flags = {
        "schedule": {
            "n_runs": getattr(args, "runs", None),
            "outer_steps": getattr(args, "outer", None),
            "inner_steps": getattr(args, "inner", None),
            "j_tilde": args.jtilde,
            "initial_mcmc_iterations": getattr(args, "mcmc_init_iters", None),
            "resample_warmup_steps": getattr(args, "warmup_resample_steps", None),
            "relaxation": getattr(args, "relaxation", None),
        },
        "oracle": {"n_iterations": getattr(args, "oracle_iters", None), "seed": args.seed},
    }
    return {section: {k: v for k, v in values.items() if v is not None} for section, values in flags.items()}


def load_settings(args: argparse.Namespace) -> Settings:
    """Defaults, then the config file, then flags, then AGGREFUSE_THREADS."""
    model_cls, config_cls = BUILTIN_MODELS[args.model]
    sections: dict[str, Any] = {"schedule": Schedule(), "model": config_cls(), "oracle": OracleConfig()}
    if args.config is not None:
        sections = route_overrides(load_config(args.config), sections)
    for name, values in _flag_overrides(args).items():
        sections = route_overrides({f"{name}.{k}": v for k, v in values.items()}, sections)
    threads = threads_from_env()
    if threads is not None:
        sections["schedule"] = replace(sections["schedule"], threads=threads)
        sections["oracle"] = replace(sections["oracle"], threads=threads)
    return Settings(args.model, model_cls(sections["model"]), sections["schedule"], sections["oracle"])


def _start(model: BuiltinModel) -> GaussianApprox:
    return GaussianApprox(model.prior_mean, INIT_MEAN_SD**2 * np.eye(model.prior_mean.size))


def _run_seed(seed: int, run: int) -> int:
    return int(np.random.SeedSequence([seed, run]).generate_state(1)[0])


def reference_fits(settings: Settings, experiment: Experiment, which: str = "all") -> list[PosteriorSummary]:
    """Red, green and, for the linear model, blue reference fits."""
    model, cfg = settings.model, settings.oracle
    start = _start(model)
    fits = []
    if which in ("red", "all"):
        fits.append(fit_red(model, experiment.local, start, cfg))
    if which in ("green", "all"):
        fits.append(fit_green(model, experiment.local, experiment.external_full, start, cfg))
    if which == "blue" or (which == "all" and settings.model_name == "linear"):
        fits.append(fit_blue(model, experiment.local, experiment.external, start, cfg))
    return fits


def do_run(args: argparse.Namespace, settings: Settings) -> int:
    """The `run` subcommand."""
    experiment = simulate_experiment(settings.model, args.seed)
    out: Path = args.out
    schedule = settings.schedule
    workers = min(schedule.n_runs, schedule.threads)

    def one_run(run: int) -> RunTrace:
        model = settings.model
        run_seed = _run_seed(args.seed, run)
        init = initialize_pseudo_priors(
            model.parameter_spec, np.random.default_rng(run_seed), center=model.prior_mean
        )
        try:
            return run_algorithm(
                model, experiment.local, experiment.external, schedule, init, run_seed, run_id=run
            )
        except AlgorithmError as exc:
            if exc.trace is not None and exc.trace.records:
                report.write_trace(exc.trace, out / f"trace_run{run}.csv")
            raise

    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as executor:
        traces = list(executor.map(one_run, range(1, schedule.n_runs + 1)))

    for trace in traces:
        report.write_trace(trace, out / f"trace_run{trace.run_id}.csv")
        if args.resample_draws:
            rng = np.random.default_rng(np.random.SeedSequence([trace.seed, 3]))
            draws = importance_resample(trace.final_draws, trace.final_weights, args.resample_draws, rng)
            report.write_draws(trace.names, draws, out / f"draws_run{trace.run_id}.csv")
    report.write_summary(traces, out / "summary.csv")

    if len(traces) > 1:
        verdict = check_convergence(traces)
        report.write_convergence(verdict, out / "convergence.csv")
        converged = verdict.converged
        worst = float(np.max(verdict.rhat))
        print(f"Cross-run R-hat (max): {worst:.3f}")
    else:
        converged = bool(traces[0].final.k_hat < 1.0)

    if not args.no_references:
        report.write_references(reference_fits(settings, experiment), out / "references.csv")

    for trace in traces:
        print(f"Run {trace.run_id}: final k_hat {trace.final.k_hat:.3f}, efficiency {trace.final.efficiency:.3f}")
    if converged:
        print(f"Converged. Results written to {out}")
        return EXIT_CONVERGED
    print(f"Not converged; results should not be trusted. Results written to {out}")
    return EXIT_UNCONVERGED


def do_oracle(args: argparse.Namespace, settings: Settings) -> int:
    """The `oracle` subcommand."""
    experiment = simulate_experiment(settings.model, args.seed)
    path = report.write_references(reference_fits(settings, experiment, args.which), args.out / "references.csv")
    print(f"Reference fits written to {path}")
    return EXIT_CONVERGED


def do_basic(args: argparse.Namespace, settings: Settings) -> int:
    """The `basic` subcommand."""
    model = settings.model
    experiment = simulate_experiment(model, args.seed)
    cfg = SamplerConfig(
        n_chains=settings.schedule.n_chains,
        n_iterations=args.mcmc_init_iters or BASIC_ITERATIONS,
        seed=args.seed,
        threads=settings.schedule.threads,
    )
    result = run_basic(
        model, experiment.local, experiment.external, _start(model), cfg, settings.schedule.j_tilde, args.seed
    )
    report.write_basic(result, args.out / "basic.csv")
    if args.resample_draws:
        rng = np.random.default_rng(np.random.SeedSequence([args.seed, 3]))
        draws = importance_resample(result.draws, result.weights.weights, args.resample_draws, rng)
        report.write_draws(result.names, draws, args.out / "draws_basic.csv")
    print(f"k_hat {result.weights.k_hat:.3f}, efficiency {result.efficiency:.3f}")
    return EXIT_CONVERGED if result.weights.k_hat < 1.0 else EXIT_UNCONVERGED


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point for aggrefuse."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"aggrefuse: {exc.message}", file=sys.stderr)
        return EXIT_ERROR
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        settings = load_settings(args)
        match args.command:
            case "run":
                return do_run(args, settings)
            case "oracle":
                return do_oracle(args, settings)
            case "basic":
                return do_basic(args, settings)
    except FAILURES as exc:
        logger.debug("failure", exc_info=True)
        print(f"Error: {getattr(exc, 'message', exc)}", file=sys.stderr)
        return EXIT_ERROR
    except KeyboardInterrupt:
        print("\nKeyboard interrupt received. Exiting.")
        return EXIT_ERROR
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
