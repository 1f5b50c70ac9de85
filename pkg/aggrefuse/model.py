"""
The hierarchical model contract. A ModelSpec supplies priors, the
individual-level distribution, a data simulator and the matching likelihood;
the algorithm only talks to models through this interface.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Protocol, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import expit, logit


class ModelError(Exception):
    """Exception raised for inconsistent model inputs."""

    def __init__(self, message: str) -> None:
        self.message = message
        super().__init__(self.message)


class Transform(Enum):
    """Map from the natural scale of a parameter to the unconstrained scale."""

    IDENTITY = "identity"
    LOG = "log"
    LOGIT = "logit"


@dataclass(frozen=True)
class ParameterSpec:
    """
    Names and transforms of the shared parameters φ and of the shift δ.

    delta_target[i] is the index of the φ component that δ_i shifts.
    """

    names: tuple[str, ...]
    transforms: tuple[Transform, ...]
    delta_names: tuple[str, ...]
    delta_target: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.names) != len(self.transforms):
            raise ModelError("every parameter needs exactly one transform")
        if len(self.delta_names) != len(self.delta_target):
            raise ModelError("every delta component needs exactly one target")
        if len(set(self.delta_target)) != len(self.delta_target):
            raise ModelError(f"delta targets are not distinct: {self.delta_target}")
        for idx in self.delta_target:
            if not 0 <= idx < len(self.names):
                raise ModelError(f"delta target index {idx} is out of range")

    @property
    def dim_phi(self) -> int:
        """Number of shared parameters."""
        return len(self.names)

    @property
    def dim_delta(self) -> int:
        """Number of shift parameters."""
        return len(self.delta_names)

    @property
    def all_names(self) -> tuple[str, ...]:
        """φ names followed by δ names."""
        return self.names + self.delta_names


@dataclass(frozen=True)
class LocalDataset:
    """
    Individual-level data y (J x T) observed at design points x.

    arms holds one covariate per individual (0 control/placebo, 1 treated).
    """

    y: NDArray
    x: NDArray[np.float64]
    arms: Optional[NDArray[np.int_]] = None

    def __post_init__(self) -> None:
        y = np.asarray(self.y)
        x = np.asarray(self.x, dtype=float)
        if y.ndim != 2 or y.shape[1] != x.size:
            raise ModelError(f"data of shape {y.shape} does not match {x.size} design points")
        if np.any(np.diff(x) <= 0):
            raise ModelError("design points must be strictly increasing")
        arms = np.zeros(y.shape[0], dtype=int) if self.arms is None else np.asarray(self.arms, dtype=int)
        if arms.shape != (y.shape[0],):
            raise ModelError(f"{arms.size} arm indicators given for {y.shape[0]} individuals")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "arms", arms)

    @property
    def n_individuals(self) -> int:
        """J."""
        return int(self.y.shape[0])

    @property
    def n_times(self) -> int:
        """T."""
        return int(self.x.size)


@dataclass(frozen=True)
class ExternalSummary:
    """Averages ȳ′ over J′ individuals at design points x, all in one arm."""

    y_bar: NDArray[np.float64]
    n_individuals: int
    x: NDArray[np.float64]
    arm: int = 0

    def __post_init__(self) -> None:
        y_bar = np.asarray(self.y_bar, dtype=float)
        x = np.asarray(self.x, dtype=float)
        if y_bar.shape != x.shape or y_bar.ndim != 1:
            raise ModelError(f"{y_bar.size} averages given for {x.size} design points")
        if self.n_individuals < 2:
            raise ModelError("an external summary must average at least two individuals")
        object.__setattr__(self, "y_bar", y_bar)
        object.__setattr__(self, "x", x)

    @classmethod
    def from_full_data(cls, data: LocalDataset) -> ExternalSummary:
        """Column means of a complete external dataset sharing one arm."""
        arms = np.unique(data.arms)
        if arms.size != 1:
            raise ModelError("external individuals must all share one arm")
        return cls(data.y.mean(axis=0), data.n_individuals, data.x, int(arms[0]))

    def arm_indicators(self, n: int) -> NDArray[np.int_]:
        """Arm indicators for n simulated individuals under these conditions."""
        return np.full(n, self.arm, dtype=int)


class ModelSpec(Protocol):
    """
    Interface of a hierarchical model p(φ) p(δ|φ) ∏ p(α_j|φ) p(y_j|α_j, φ).

    φ and δ are always on the unconstrained scale, and the priors are densities
    on that scale. Array arguments named phi may be a single vector (d,) or a
    stack (n, d); log_prior and log_prior_delta reduce over the last axis.
    α is an (n_individuals, n_alpha) array.
    """

    parameter_spec: ParameterSpec
    n_alpha: int

    def log_prior(self, phi: NDArray) -> NDArray | float:
        """log p(φ)."""

    def log_prior_delta(self, delta: NDArray, phi: NDArray | None = None) -> NDArray | float:
        """log p(δ|φ); models with independent δ ignore phi."""

    def sample_prior_delta(self, n: int, rng: np.random.Generator) -> NDArray:
        """n draws from p(δ) as an (n, dim δ) array."""

    def prior_variance(self) -> NDArray:
        """Marginal prior variances of φ."""

    def log_individual_prior(self, alpha: NDArray, phi: NDArray) -> NDArray:
        """Per-individual log p(α_j|φ) as a length-J vector."""

    def sample_individual(
        self, phi: NDArray, arms: NDArray, rng: np.random.Generator
    ) -> NDArray:
        """Draw α_j ~ p(α|φ) for each entry of arms."""

    def simulate_observations(
        self, alpha: NDArray, phi: NDArray, x: NDArray, arms: NDArray, rng: np.random.Generator
    ) -> NDArray:
        """Draw y_j ~ p(y|α_j, φ) at design points x, one row per individual."""

    def log_likelihood(
        self, y: NDArray, alpha: NDArray, phi: NDArray, x: NDArray, arms: NDArray
    ) -> NDArray:
        """Per-individual log p(y_j|α_j, φ) as a length-J vector."""


def shift_parameters(phi: ArrayLike, delta: ArrayLike, spec: ParameterSpec) -> NDArray:
    """
    φ′ = φ + δ, with δ added at spec.delta_target.

    Works on a single vector or row-wise on stacks of draws.
    """
    phi = np.asarray(phi, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if phi.shape[-1] != spec.dim_phi or delta.shape[-1] != spec.dim_delta:
        raise ModelError(
            f"expected φ of length {spec.dim_phi} and δ of length {spec.dim_delta}"
        )
    shifted = phi.copy()
    shifted[..., list(spec.delta_target)] += delta
    return shifted


def to_unconstrained(values: ArrayLike, transforms: Sequence[Transform]) -> NDArray:
    """Map natural-scale values to the unconstrained scale."""
    values = np.asarray(values, dtype=float)
    out = values.copy()
    for i, transform in enumerate(transforms):
        v = values[..., i]
        match transform:
            case Transform.IDENTITY:
                pass
            case Transform.LOG:
                if np.any(v <= 0):
                    raise ModelError(f"component {i} must be positive for a log transform")
                out[..., i] = np.log(v)
            case Transform.LOGIT:
                if np.any((v <= 0) | (v >= 1)):
                    raise ModelError(f"component {i} must lie in (0, 1) for a logit transform")
                out[..., i] = logit(v)
    return out


def from_unconstrained(values: ArrayLike, transforms: Sequence[Transform]) -> NDArray:
    """Inverse of to_unconstrained."""
    values = np.asarray(values, dtype=float)
    out = values.copy()
    for i, transform in enumerate(transforms):
        match transform:
            case Transform.IDENTITY:
                pass
            case Transform.LOG:
                out[..., i] = np.exp(values[..., i])
            case Transform.LOGIT:
                out[..., i] = expit(values[..., i])
    return out
