"""Deterministic scaling-limit solvers.

Two representations of the limiting measure-valued flow:

* weighted cohorts transported exactly along age characteristics, with
  survival decay and one newborn cohort per type per step (the default,
  valid for atomic initial data); and
* per-type density arrays on a uniform age grid advanced one cell per
  step along characteristics, with renewal boundary integrals (the
  density form of the two-sex dynamics).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import RateModel, birth_intensity_means, functionals, pair
from .functions import TestFunction

__all__ = [
    "CohortMeasure",
    "DensityField",
    "LimitTrajectory",
    "solve_limit",
    "solve_density",
    "mild_form_values",
]


@dataclass
class CohortMeasure:
    """Weighted cohorts: atoms (type, age) with nonnegative masses."""

    types: np.ndarray
    ages: np.ndarray
    masses: np.ndarray
    clock: float = 0.0

    @classmethod
    def from_cohorts(cls, cohorts, clock: float = 0.0):
        """Build from (type_index, age, mass) triples."""
        if not cohorts:
            return cls(np.empty(0, dtype=np.int64), np.empty(0), np.empty(0), clock)
        t, a, m = zip(*cohorts)
        return cls(np.asarray(t, dtype=np.int64), np.asarray(a, dtype=float), np.asarray(m, dtype=float), clock)

    @property
    def total_mass(self) -> float:
        return float(self.masses.sum())

    def copy(self) -> "CohortMeasure":
        return CohortMeasure(self.types.copy(), self.ages.copy(), self.masses.copy(), self.clock)

    def bin_masses(self, da: float, n_cells: int, n_types: int) -> np.ndarray:
        """Cell masses on the age grid, shape (n_types, n_cells).

        Cell j covers [j*da, (j+1)*da); mass beyond the last cell is an
        error (ages must stay inside the configured box)."""
        out = np.zeros((n_types, n_cells))
        if self.types.size == 0:
            return out
        # nudge: ages often sit exactly on cell boundaries and the
        # division can land a hair below the intended integer
        cells = np.floor(self.ages / da + 1e-9).astype(int)
        if np.any(cells >= n_cells) or np.any(cells < 0):
            raise ValueError("cohort age outside the grid box")
        np.add.at(out, (self.types, cells), self.masses)
        return out


@dataclass
class DensityField:
    """Per-type age densities sampled at nodes j * da."""

    densities: np.ndarray  # (n_types, n_nodes)
    da: float
    clock: float = 0.0

    @property
    def n_types(self) -> int:
        return self.densities.shape[0]

    @property
    def node_ages(self) -> np.ndarray:
        return np.arange(self.densities.shape[1]) * self.da

    def total_mass(self) -> float:
        return float(sum(np.trapezoid(d, dx=self.da) for d in self.densities))

    def pair(self, f: TestFunction) -> float:
        ages = self.node_ages
        out = 0.0
        for i, d in enumerate(self.densities):
            out += float(np.trapezoid(f(np.full_like(ages, i, dtype=int), ages) * d, dx=self.da))
        return out

    def copy(self) -> "DensityField":
        return DensityField(self.densities.copy(), self.da, self.clock)


def _phi_of(model: RateModel, measure) -> np.ndarray:
    if isinstance(measure, DensityField):
        return np.array([measure.pair(g) for g in model.dependence])
    return functionals(model, measure)


@dataclass
class LimitTrajectory:
    """Snapshots of the limit flow at requested times."""

    times: np.ndarray
    states: list

    def series(self, f: TestFunction) -> np.ndarray:
        out = np.empty(len(self.states))
        for k, st in enumerate(self.states):
            out[k] = st.pair(f) if isinstance(st, DensityField) else pair(f, st)
        return out

    def at(self, t: float):
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-9 + 1e-9 * abs(t):
            raise KeyError(f"no snapshot at t={t}")
        return self.states[k]


def solve_limit(
    model: RateModel,
    initial: CohortMeasure,
    T: float,
    dt: float,
    time_grid=None,
    mass_floor: float = 1e-12,
) -> LimitTrajectory:
    """March the cohort representation of the limit flow to time T.

    Each step transports every cohort exactly by dt, applies survival
    decay exp(-h dt) with h evaluated at midpoint age and a Heun-style
    midpoint estimate of the dependence vector, and spawns one newborn
    cohort per type carrying the step's birth mass at age dt/2. Cohorts
    below ``mass_floor`` (relative to total) merge into their nearest
    same-type neighbour.
    """
    if dt <= 0 or dt > T:
        raise ValueError("need 0 < dt <= T")
    if time_grid is None:
        time_grid = np.linspace(0.0, T, 51)
    time_grid = np.asarray(time_grid, dtype=float)

    state = initial.copy()
    snaps, times = [], []
    grid_idx = 0

    def record():
        nonlocal grid_idx
        while grid_idx < len(time_grid) and time_grid[grid_idx] <= state.clock + 1e-12:
            snaps.append(state.copy())
            times.append(time_grid[grid_idx])
            grid_idx += 1

    record()
    while state.clock < T - 1e-12:
        t0 = state.clock
        # clip so every requested snapshot time is a step endpoint
        h_dt = min(dt, T - t0)
        if grid_idx < len(time_grid) and time_grid[grid_idx] > t0 + 1e-12:
            h_dt = min(h_dt, time_grid[grid_idx] - t0)
        types, ages, masses = state.types, state.ages, state.masses
        phi0 = _phi_of(model, state)

        # Euler predictor for the dependence vector at the step midpoint
        h0 = np.asarray(model.death_rate(types, ages, phi0), dtype=float)
        n0 = birth_intensity_means(model, types, ages, phi0)
        half = CohortMeasure(
            types=np.concatenate([types, np.arange(model.n_types)]),
            ages=np.concatenate([ages + h_dt / 2, np.full(model.n_types, h_dt / 4)]),
            masses=np.concatenate([masses * np.exp(-h0 * h_dt / 2), (h_dt / 2) * (masses @ n0)]),
            clock=t0 + h_dt / 2,
        )
        phi_mid = _phi_of(model, half)

        h_mid = np.asarray(model.death_rate(types, ages + h_dt / 2, phi_mid), dtype=float)
        # midpoint rule for the step's birth mass: the intensity is paired
        # against the whole predictor state (decayed parents plus the
        # first-order newborn atom), then the newborns survive their
        # average remaining half-step
        n_half = birth_intensity_means(model, half.types, half.ages, phi_mid)
        newborn_types = np.arange(model.n_types)
        h_newborn = np.asarray(
            model.death_rate(newborn_types, np.full(model.n_types, h_dt / 4), phi_mid), dtype=float
        )
        births = h_dt * (half.masses @ n_half) * np.exp(-h_newborn * h_dt / 2)

        new_types = np.concatenate([types, newborn_types])
        new_ages = np.concatenate([ages + h_dt, np.full(model.n_types, h_dt / 2)])
        new_masses = np.concatenate([masses * np.exp(-h_mid * h_dt), births])
        keepable = new_masses > 0.0
        state = CohortMeasure(new_types[keepable], new_ages[keepable], new_masses[keepable], t0 + h_dt)
        state = _merge_small(state, mass_floor, model.n_types)
        record()
    record()
    return LimitTrajectory(times=np.asarray(times), states=snaps)


def _merge_small(state: CohortMeasure, floor_rel: float, n_types: int) -> CohortMeasure:
    total = state.total_mass
    if total <= 0.0 or state.types.size < 2:
        return state
    floor = floor_rel * total
    small = state.masses < floor
    if not np.any(small):
        return state
    types, ages, masses = state.types.copy(), state.ages.copy(), state.masses.copy()
    for j in np.nonzero(small)[0]:
        if masses[j] == 0.0:
            continue
        same = np.nonzero((types == types[j]) & (masses > 0.0))[0]
        same = same[same != j]
        if len(same) == 0:
            continue
        k = same[np.argmin(np.abs(ages[same] - ages[j]))]
        masses[k] += masses[j]
        masses[j] = 0.0
    keep = masses > 0.0
    return CohortMeasure(types[keep], ages[keep], masses[keep], state.clock)


def mild_form_values(
    model: RateModel,
    initial: CohortMeasure,
    T: float,
    phi,
    fs,
    n_steps: int = 4000,
) -> dict:
    """Frozen-environment reference via the renewal (Volterra) equation.

    With the dependence vector held at ``phi`` the flow is linear: the
    per-type birth flux B solves a Volterra equation of the second kind
    driven by the transported-and-decayed initial atoms, and any paired
    functional at time T follows by one more quadrature. Solved with the
    trapezoidal rule (second order, independent of the marching
    solvers), so it serves as a cross-check oracle.
    """
    phi = np.asarray(phi, dtype=float)
    nt = model.n_types
    dt = T / n_steps
    ts = np.linspace(0.0, T, n_steps + 1)

    # survival factors: cumulative trapezoid of the hazard along age
    def cum_hazard(types, age0):
        ages = age0 + ts
        h = np.asarray(model.death_rate(np.full_like(ts, types, dtype=int), ages, phi), dtype=float)
        out = np.concatenate(([0.0], np.cumsum(0.5 * (h[1:] + h[:-1]) * dt)))
        return np.exp(-out)

    # kernel M[tau][i, j] = survival_j(tau) * n^i(j, tau)
    newborn_surv = np.stack([cum_hazard(j, 0.0) for j in range(nt)])  # (nt, n_steps+1)
    kernel = np.empty((n_steps + 1, nt, nt))
    for j in range(nt):
        n_j = birth_intensity_means(model, np.full_like(ts, j, dtype=int), ts, phi)  # (n_steps+1, nt)
        kernel[:, :, j] = newborn_surv[j][:, None] * n_j

    # forcing from the initial atoms
    atom_surv = [cum_hazard(int(tp), float(a)) for tp, a in zip(initial.types, initial.ages)]
    forcing = np.zeros((n_steps + 1, nt))
    for k, (tp, a, m) in enumerate(zip(initial.types, initial.ages, initial.masses)):
        n_k = birth_intensity_means(model, np.full_like(ts, tp, dtype=int), a + ts, phi)
        forcing += m * atom_surv[k][:, None] * n_k

    B = np.zeros((n_steps + 1, nt))
    B[0] = forcing[0]
    eye = np.eye(nt)
    for m in range(1, n_steps + 1):
        # trapezoid: B_m = forcing_m + dt * (K_m B_0 / 2 + sum K_{m-l} B_l + K_0 B_m / 2)
        acc = 0.5 * kernel[m] @ B[0]
        if m > 1:
            acc += np.einsum("lij,lj->i", kernel[m - 1:0:-1], B[1:m])
        rhs = forcing[m] + dt * acc
        B[m] = np.linalg.solve(eye - 0.5 * dt * kernel[0], rhs)

    out = {}
    for f in fs:
        val = 0.0
        for k, (tp, a, mass) in enumerate(zip(initial.types, initial.ages, initial.masses)):
            val += mass * atom_surv[k][-1] * float(f(np.asarray(int(tp)), np.asarray(a + T)))
        for j in range(nt):
            fj = np.asarray(f(np.full_like(ts, j, dtype=int), T - ts), dtype=float)
            integrand = B[:, j] * newborn_surv[j][::-1] * fj
            val += float(np.trapezoid(integrand, dx=dt))
        out[f.name] = val
    return out


def solve_density(
    model: RateModel,
    initial: DensityField,
    T: float,
    dt: float | None = None,
    time_grid=None,
) -> LimitTrajectory:
    """Characteristics-aligned density solver (dt = grid spacing).

    Per step the arrays shift one cell, decay by exp(-h dt) along the
    characteristic, and the age-0 node is set from the renewal integral
    sum_j int n^i(j, v) d_j(v) dv by trapezoidal quadrature.
    """
    da = initial.da
    if dt is None:
        dt = da
    if abs(dt - da) > 1e-12:
        raise ValueError("density solver supports only the aligned mode dt = da")
    if time_grid is None:
        time_grid = np.linspace(0.0, T, 51)
    time_grid = np.asarray(time_grid, dtype=float)

    state = initial.copy()
    snaps, times = [], []
    grid_idx = 0

    def record():
        nonlocal grid_idx
        while grid_idx < len(time_grid) and time_grid[grid_idx] <= state.clock + 1e-9:
            snaps.append(state.copy())
            times.append(time_grid[grid_idx])
            grid_idx += 1

    record()
    n_steps = int(round(T / dt))
    node_ages = state.node_ages
    type_ids = [np.full_like(node_ages, i, dtype=int) for i in range(model.n_types)]
    mid_ages = node_ages[:-1] + dt / 2

    def shift_decay(d, phi):
        new = np.zeros_like(d)
        for i in range(model.n_types):
            h_mid = np.asarray(model.death_rate(type_ids[i][:-1], mid_ages, phi), dtype=float)
            new[i, 1:] = d[i, :-1] * np.exp(-h_mid * dt)
            new[i, 0] = d[i, 0]  # placeholder until the renewal pass
        return new

    def renewal(field):
        phi_new = _phi_of(model, field)
        boundary = np.zeros(model.n_types)
        for j in range(model.n_types):
            n_j = birth_intensity_means(model, type_ids[j], node_ages, phi_new)
            boundary += np.trapezoid(n_j * field.densities[j][:, None], dx=da, axis=0)
        field.densities[:, 0] = boundary

    for _ in range(n_steps):
        phi0 = _phi_of(model, state)
        predictor = DensityField(shift_decay(state.densities, phi0), da, state.clock + dt)
        renewal(predictor)
        # Heun: redo the decay with the dependence vector averaged over
        # the step, then set the new boundary from the renewal integral
        phi_mid = 0.5 * (phi0 + _phi_of(model, predictor))
        new = shift_decay(state.densities, phi_mid)
        new[:, 0] = predictor.densities[:, 0]
        state = DensityField(new, da, state.clock + dt)
        renewal(state)
        record()
    record()
    return LimitTrajectory(times=np.asarray(times), states=snaps)
