"""Demographic parameter bundle and the pointwise operators built on it.

A RateModel holds the birth and death intensities, the offspring laws at
bearing and at splitting, the finite vector of population functionals
the intensities may depend on, declared uniform bounds, and (optionally)
immigration. Rates are always evaluated at the scaled measure S/K; the
model itself is K-free.

The operators here are the drift operator acting on a C1 test function
(aging + death + deposit of newborn mass at age 0) and the quadratic
variation integrand of the compensated dynamics.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .functions import TestFunction
from .offspring import OffspringLaw
from .states import PopulationMeasure

__all__ = [
    "Bounds",
    "Immigration",
    "DiscreteArrivalKernel",
    "RateModel",
    "pair",
    "functionals",
    "birth_intensity_means",
    "birth_intensity_seconds",
    "generator_apply",
    "qv_integrand",
]


@dataclass(frozen=True)
class Bounds:
    """Declared uniform bounds on the model parameters.

    The simulator's thinning envelope is built from these; evaluating a
    rate above its bound is a model-contract error.
    """

    b_max: float
    h_max: float
    m_max: float = np.inf
    gamma_max: float = np.inf
    xi_max: int = 100
    rho_max: float = 0.0
    g_max: float = 0.0


@dataclass(frozen=True)
class DiscreteArrivalKernel:
    """Arrival state distribution as a finite mixture of atoms.

    atoms: ((prob, type_index, age), ...). Finite support keeps the
    pairing integral of any test function exact.
    """

    atoms: tuple

    def __post_init__(self):
        if abs(sum(p for p, _, _ in self.atoms) - 1.0) > 1e-12:
            raise ValueError("arrival kernel probabilities must sum to 1")

    def sample(self, rng: np.random.Generator):
        probs = np.array([p for p, _, _ in self.atoms])
        j = int(rng.choice(len(self.atoms), p=probs))
        _, i, a = self.atoms[j]
        return int(i), float(a)

    def pair(self, f: TestFunction) -> float:
        """Integral of f against the kernel."""
        return float(
            sum(p * float(f(np.asarray(i), np.asarray(a))) for p, i, a in self.atoms)
        )


@dataclass(frozen=True)
class Immigration:
    """Immigration stream: rate, batch-size law, arrival kernel.

    ``rate`` is a callable (phi, t) -> float, bounded by bounds.g_max.
    ``batch_sizes`` is a finite pmf ((size, prob), ...) from which the
    batch mean and second moment are derived.
    """

    rate: Callable
    batch_sizes: tuple
    kernel: DiscreteArrivalKernel

    def __post_init__(self):
        if abs(sum(p for _, p in self.batch_sizes) - 1.0) > 1e-12:
            raise ValueError("batch size pmf must sum to 1")

    def batch_mean(self) -> float:
        return float(sum(n * p for n, p in self.batch_sizes))

    def batch_second(self) -> float:
        return float(sum(n * n * p for n, p in self.batch_sizes))

    def max_batch(self) -> int:
        return int(max(n for n, _ in self.batch_sizes))

    def sample_batch(self, rng: np.random.Generator) -> int:
        sizes = np.array([n for n, _ in self.batch_sizes])
        probs = np.array([p for _, p in self.batch_sizes])
        return int(rng.choice(sizes, p=probs))


@dataclass(frozen=True)
class RateModel:
    """One-age multi-type model: intensities, offspring laws, dependence.

    ``birth_rate`` and ``death_rate`` are callables (types, ages, phi)
    -> array, broadcasting over leading axes of ``ages`` (shape (n,) or
    (m, n)) with ``phi`` of matching shape (d,) or (m, d).

    ``birth_rate_dphi`` / ``death_rate_dphi`` return arrays with a
    trailing axis of length d (the partial derivatives in the dependence
    vector); they are optional and only needed by the fluctuation
    machinery.
    """

    n_types: int
    birth_rate: Callable
    death_rate: Callable
    bearing_law: OffspringLaw
    splitting_law: OffspringLaw
    bounds: Bounds
    dependence: tuple = ()  # tuple of TestFunction g_1..g_d
    immigration: Immigration | None = None
    birth_rate_dphi: Callable | None = None
    death_rate_dphi: Callable | None = None

    def __post_init__(self):
        if self.bearing_law.n_types != self.n_types or self.splitting_law.n_types != self.n_types:
            raise ValueError("offspring law type count does not match model")

    @property
    def n_dependence(self) -> int:
        return len(self.dependence)

    @property
    def has_derivatives(self) -> bool:
        return self.birth_rate_dphi is not None and self.death_rate_dphi is not None

    def zero_phi(self) -> np.ndarray:
        return np.zeros(self.n_dependence)


def pair(f: TestFunction, measure) -> float:
    """(f, S): exact sum of f over the atoms of a discrete measure.

    Accepts a PopulationMeasure (unit masses) or any object with
    ``types``, ``ages`` and ``masses`` arrays (weighted cohorts).
    """
    if isinstance(measure, PopulationMeasure):
        if measure.size == 0:
            return 0.0
        return float(np.sum(f(measure.types, measure.ages)))
    if measure.types.size == 0:
        return 0.0
    return float(np.sum(measure.masses * f(measure.types, measure.ages)))


def functionals(model: RateModel, measure, scale: float = 1.0) -> np.ndarray:
    """Dependence vector phi_j = (g_j, measure/scale)."""
    return np.array([pair(g, measure) / scale for g in model.dependence])


def birth_intensity_means(model: RateModel, types, ages, phi) -> np.ndarray:
    """n^i = b m_bear^i + h m_split^i, shape (..., n_types)."""
    b = np.asarray(model.birth_rate(types, ages, phi), dtype=float)
    h = np.asarray(model.death_rate(types, ages, phi), dtype=float)
    return b[..., None] * model.bearing_law.mean() + h[..., None] * model.splitting_law.mean()


def birth_intensity_seconds(model: RateModel, types, ages, phi) -> np.ndarray:
    """w^{i1 i2} = b gamma_bear + h gamma_split, shape (..., k, k)."""
    b = np.asarray(model.birth_rate(types, ages, phi), dtype=float)
    h = np.asarray(model.death_rate(types, ages, phi), dtype=float)
    return (
        b[..., None, None] * model.bearing_law.second_moment()
        + h[..., None, None] * model.splitting_law.second_moment()
    )


def generator_apply(model: RateModel, f: TestFunction, types, ages, phi) -> np.ndarray:
    """Pointwise drift operator: f' - h f + sum_i f(i,0) n^i."""
    if not f.differentiable:
        raise ValueError(f"drift operator needs a differentiable test function, got {f.name!r}")
    types = np.asarray(types)
    ages = np.asarray(ages, dtype=float)
    h = np.asarray(model.death_rate(types, ages, phi), dtype=float)
    n = birth_intensity_means(model, types, ages, phi)
    f0 = f.at_birth(model.n_types)
    return np.asarray(f.deriv(types, ages), dtype=float) - h * np.asarray(f(types, ages), dtype=float) + n @ f0


def qv_integrand(model: RateModel, f: TestFunction, types, ages, phi) -> np.ndarray:
    """Pointwise quadratic-variation integrand of the compensated
    dynamics:

        sum_{i1,i2} f(i1,0) f(i2,0) w^{i1 i2} + h f^2
        - 2 sum_i f(i,0) h m_split^i f.
    """
    types = np.asarray(types)
    ages = np.asarray(ages, dtype=float)
    h = np.asarray(model.death_rate(types, ages, phi), dtype=float)
    fv = np.asarray(f(types, ages), dtype=float)
    f0 = f.at_birth(model.n_types)
    w = birth_intensity_seconds(model, types, ages, phi)
    quad = np.einsum("...ij,i,j->...", w, f0, f0)
    cross = 2.0 * (f0 @ model.splitting_law.mean()) * h * fv
    return quad + h * fv * fv - cross
