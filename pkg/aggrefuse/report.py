"""
Plot-ready CSV output. Floats are written with repr so that reading a file
back recovers every value exactly; non-finite values appear as nan/inf.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.typing import NDArray

from aggrefuse.algorithm import BasicResult, ConvergenceReport, RunTrace, StepRecord
from aggrefuse.oracle import PosteriorSummary

TRACE_HEADER = (
    "step",
    "outer",
    "inner",
    "parameter",
    "weighted_mean",
    "weighted_sd",
    "k_hat",
    "efficiency",
    "rhat_mcmc",
    "mode",
)
SUMMARY_HEADER = ("run", "seed") + TRACE_HEADER
REFERENCE_HEADER = ("fit", "parameter", "mean", "sd", "rhat")
CONVERGENCE_HEADER = ("parameter", "rhat_runs", "converged")
BASIC_HEADER = ("parameter", "weighted_mean", "weighted_sd", "k_hat", "efficiency")


@dataclass(frozen=True)
class TraceRow:
    """One parsed row of a trace file."""

    step: int
    outer: int
    inner: int
    parameter: str
    weighted_mean: float
    weighted_sd: float
    k_hat: float
    efficiency: float
    rhat_mcmc: float
    mode: str


def _fmt(value: float) -> str:
    return repr(float(value))


def _record_rows(trace: RunTrace, record: StepRecord) -> Iterable[list[str]]:
    for i, name in enumerate(trace.names):
        rhat_mcmc = record.rhat_mcmc[i] if i < trace.dim_phi else math.nan
        yield [
            str(record.step),
            str(record.outer),
            str(record.inner),
            name,
            _fmt(record.mean[i]),
            _fmt(record.sd[i]),
            _fmt(record.k_hat),
            _fmt(record.efficiency),
            _fmt(rhat_mcmc),
            record.mode.value,
        ]


def _open(path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    return path.open("w", encoding="utf-8", newline="")


def write_trace(trace: RunTrace, path: str | Path) -> Path:
    """One row per parameter per inner step."""
    path = Path(path)
    with _open(path) as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(TRACE_HEADER)
        for record in trace.records:
            writer.writerows(_record_rows(trace, record))
    return path


def read_trace(path: str | Path) -> list[TraceRow]:
    """Parse a file written by write_trace."""
    with Path(path).open(encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != TRACE_HEADER:
            raise ValueError(f"{path} is not a trace file: header {reader.fieldnames}")
        return [
            TraceRow(
                step=int(row["step"]),
                outer=int(row["outer"]),
                inner=int(row["inner"]),
                parameter=row["parameter"],
                weighted_mean=float(row["weighted_mean"]),
                weighted_sd=float(row["weighted_sd"]),
                k_hat=float(row["k_hat"]),
                efficiency=float(row["efficiency"]),
                rhat_mcmc=float(row["rhat_mcmc"]),
                mode=row["mode"],
            )
            for row in reader
        ]


def write_summary(traces: Sequence[RunTrace], path: str | Path) -> Path:
    """The final-step rows of every run, prefixed with the run id and seed."""
    path = Path(path)
    with _open(path) as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(SUMMARY_HEADER)
        for trace in traces:
            for row in _record_rows(trace, trace.final):
                writer.writerow([str(trace.run_id), str(trace.seed), *row])
    return path


def write_references(summaries: Sequence[PosteriorSummary], path: str | Path) -> Path:
    """Posterior mean, sd and R-hat of each reference fit."""
    path = Path(path)
    with _open(path) as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(REFERENCE_HEADER)
        for summary in summaries:
            for i, name in enumerate(summary.names):
                writer.writerow(
                    [summary.label, name, _fmt(summary.mean[i]), _fmt(summary.sd[i]), _fmt(summary.rhat[i])]
                )
    return path


def write_convergence(report: ConvergenceReport, path: str | Path) -> Path:
    """Cross-run R-hat per parameter and the overall verdict."""
    path = Path(path)
    with _open(path) as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CONVERGENCE_HEADER)
        for name, r in zip(report.names, report.rhat):
            writer.writerow([name, _fmt(r), str(report.converged).lower()])
    return path


def write_draws(names: Sequence[str], draws: NDArray[np.float64], path: str | Path) -> Path:
    """Equally weighted draws, one column per parameter."""
    draws = np.atleast_2d(np.asarray(draws, dtype=float))
    if draws.shape[1] != len(names):
        raise ValueError(f"{len(names)} names given for {draws.shape[1]} columns")
    path = Path(path)
    with _open(path) as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(names)
        writer.writerows([_fmt(v) for v in row] for row in draws)
    return path


def write_basic(result: BasicResult, path: str | Path) -> Path:
    """Weighted summaries of the one-pass importance sampler."""
    path = Path(path)
    with _open(path) as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(BASIC_HEADER)
        for i, name in enumerate(result.names):
            writer.writerow(
                [name, _fmt(result.mean[i]), _fmt(result.sd[i]), _fmt(result.weights.k_hat), _fmt(result.efficiency)]
            )
    return path
