"""Exact event-driven simulation by thinning of bounded intensities.

Between events every age advances at rate 1, so the population state is
fully described by types and birth times. Candidate event times come
from an exponential clock at the declared envelope rate; each candidate
is accepted with probability (actual total intensity)/(envelope), which
makes the scheme statistically exact as long as the declared bounds
really dominate the rates (violations raise immediately).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .functions import TestFunction
from .model import RateModel, qv_integrand, generator_apply
from .rng import stream
from .states import PopulationMeasure

__all__ = [
    "BoundViolationError",
    "PopulationCapError",
    "EventRecord",
    "Trajectory",
    "simulate",
    "martingale_residual",
    "empirical_qv",
    "replay_series",
]

BEARING = "BEARING"
SPLIT_DEATH = "SPLIT_DEATH"
PLAIN_DEATH = "PLAIN_DEATH"
IMMIGRATION = "IMMIGRATION"

DEFAULT_POP_CAP = 10_000_000


class BoundViolationError(RuntimeError):
    """A rate evaluated above its declared bound (model contract broken)."""


class PopulationCapError(RuntimeError):
    """Population exceeded the configured hard cap."""


@dataclass(frozen=True, slots=True)
class EventRecord:
    time: float
    kind: str
    subject_id: int = -1
    offspring: tuple = ()  # per-type newborn counts (birth kinds)
    immigrants: tuple = ()  # ((type, age_at_arrival), ...)
    new_ids: tuple = ()


@dataclass
class Trajectory:
    initial: PopulationMeasure
    events: list
    K: float
    T: float
    seed: int | None
    time_grid: np.ndarray
    series: dict  # test-function name -> values of (f, S_t) on the grid
    test_functions: tuple = ()

    @property
    def n_events(self) -> int:
        return len(self.events)


def _series_row(fs, types, bts, t):
    ages = t - bts
    return [float(np.sum(f(types, ages))) if len(types) else 0.0 for f in fs]


def simulate(
    model: RateModel,
    initial: PopulationMeasure,
    K: float,
    T: float,
    seed,
    time_grid=None,
    test_functions: tuple = (),
    pop_cap: int = DEFAULT_POP_CAP,
    initial_age_bound: float | None = None,
) -> Trajectory:
    """Sample one exact trajectory of the population process on [0, T].

    ``seed`` may be an integer (a fresh counter-based stream is derived)
    or a numpy Generator. Dependence functionals are evaluated at the
    scaled measure S/K. ``time_grid`` defaults to 51 equispaced points.
    """
    rng = seed if isinstance(seed, np.random.Generator) else stream(int(seed))
    seed_out = None if isinstance(seed, np.random.Generator) else int(seed)
    if time_grid is None:
        time_grid = np.linspace(0.0, T, 51)
    time_grid = np.asarray(time_grid, dtype=float)
    initial.check_invariants(initial_age_bound)

    b_hi = model.bounds.b_max
    h_hi = model.bounds.h_max
    imm = model.immigration
    g_hi = model.bounds.g_max if imm is not None else 0.0

    ids = initial.ids.copy()
    types = initial.types.copy()
    bts = initial.birth_times.copy()
    next_id = int(ids.max()) + 1 if len(ids) else 0

    events: list[EventRecord] = []
    series_rows = {f.name: [] for f in test_functions}
    grid_idx = 0
    tol = 1e-9

    def record_grid(upto: float):
        nonlocal grid_idx
        while grid_idx < len(time_grid) and time_grid[grid_idx] <= upto + tol:
            row = _series_row(test_functions, types, bts, time_grid[grid_idx])
            for f, val in zip(test_functions, row):
                series_rows[f.name].append(val)
            grid_idx += 1

    t = 0.0
    while True:
        n = len(ids)
        envelope = (b_hi + h_hi) * n + g_hi
        if envelope <= 0.0:
            record_grid(T)
            break
        t_cand = t + rng.exponential(1.0 / envelope)
        record_grid(min(t_cand, T))
        if t_cand > T:
            break
        t = t_cand

        ages = t - bts
        phi = np.array([float(np.sum(g(types, ages))) for g in model.dependence]) / K
        b_arr = np.asarray(model.birth_rate(types, ages, phi), dtype=float)
        h_arr = np.asarray(model.death_rate(types, ages, phi), dtype=float)
        if np.any(b_arr > b_hi + tol) or np.any(h_arr > h_hi + tol) or np.any(b_arr < -tol) or np.any(h_arr < -tol):
            raise BoundViolationError(
                f"intensity outside declared bounds at t={t:.6g} "
                f"(b in [{b_arr.min():.4g},{b_arr.max():.4g}], h in [{h_arr.min():.4g},{h_arr.max():.4g}])"
            )
        lam_imm = float(imm.rate(phi, t)) if imm is not None else 0.0
        if lam_imm > g_hi + tol or lam_imm < -tol:
            raise BoundViolationError(f"immigration rate {lam_imm:.4g} outside bound {g_hi:.4g} at t={t:.6g}")
        b_sum = float(b_arr.sum())
        h_sum = float(h_arr.sum())
        total = b_sum + h_sum + lam_imm
        if total > envelope + tol:
            raise BoundViolationError(f"total intensity {total:.4g} exceeds envelope {envelope:.4g} at t={t:.6g}")

        u = rng.uniform(0.0, envelope)
        if u >= total:
            continue  # thinned

        if u < lam_imm:
            batch = imm.sample_batch(rng)
            states = tuple(imm.kernel.sample(rng) for _ in range(batch))
            new_ids = tuple(range(next_id, next_id + batch))
            next_id += batch
            if batch:
                types = np.append(types, [s[0] for s in states])
                bts = np.append(bts, [t - s[1] for s in states])
                ids = np.append(ids, new_ids)
            events.append(EventRecord(time=t, kind=IMMIGRATION, immigrants=states, new_ids=new_ids))
        elif u < lam_imm + b_sum:
            j = int(np.searchsorted(np.cumsum(b_arr), u - lam_imm, side="right"))
            j = min(j, n - 1)
            counts = model.bearing_law.sample(rng)
            if counts.sum() > model.bounds.xi_max:
                raise BoundViolationError("sampled litter exceeds declared per-event cap")
            new_ids = tuple(range(next_id, next_id + int(counts.sum())))
            next_id += int(counts.sum())
            if counts.sum():
                newborn_types = np.repeat(np.arange(model.n_types), counts)
                types = np.append(types, newborn_types)
                bts = np.append(bts, np.full(len(newborn_types), t))
                ids = np.append(ids, new_ids)
            events.append(
                EventRecord(time=t, kind=BEARING, subject_id=int(ids[j]), offspring=tuple(int(c) for c in counts), new_ids=new_ids)
            )
        else:
            j = int(np.searchsorted(np.cumsum(h_arr), u - lam_imm - b_sum, side="right"))
            j = min(j, n - 1)
            counts = model.splitting_law.sample(rng)
            if counts.sum() > model.bounds.xi_max:
                raise BoundViolationError("sampled litter exceeds declared per-event cap")
            subject = int(ids[j])
            keep = np.ones(n, dtype=bool)
            keep[j] = False
            types, bts, ids = types[keep], bts[keep], ids[keep]
            new_ids = tuple(range(next_id, next_id + int(counts.sum())))
            next_id += int(counts.sum())
            if counts.sum():
                newborn_types = np.repeat(np.arange(model.n_types), counts)
                types = np.append(types, newborn_types)
                bts = np.append(bts, np.full(len(newborn_types), t))
                ids = np.append(ids, new_ids)
            kind = SPLIT_DEATH if counts.sum() else PLAIN_DEATH
            events.append(
                EventRecord(time=t, kind=kind, subject_id=subject, offspring=tuple(int(c) for c in counts), new_ids=new_ids)
            )

        if len(ids) > pop_cap:
            raise PopulationCapError(f"population {len(ids)} exceeds cap {pop_cap}")

    series = {name: np.asarray(vals) for name, vals in series_rows.items()}
    return Trajectory(
        initial=initial.copy(),
        events=events,
        K=K,
        T=T,
        seed=seed_out,
        time_grid=time_grid,
        series=series,
        test_functions=tuple(test_functions),
    )


# ---------------------------------------------------------------------------
# Replay and pathwise functionals.


def _replay_segments(traj: Trajectory):
    """Yield (t0, t1, types, birth_times, event-or-None) for the constant
    population segments of a trajectory; the event closes the segment."""
    types = traj.initial.types.copy()
    bts = traj.initial.birth_times.copy()
    ids = traj.initial.ids.copy()
    t = 0.0
    for ev in traj.events:
        yield t, ev.time, types, bts, ids, ev
        if ev.kind == IMMIGRATION:
            if ev.immigrants:
                types = np.append(types, [s[0] for s in ev.immigrants])
                bts = np.append(bts, [ev.time - s[1] for s in ev.immigrants])
                ids = np.append(ids, ev.new_ids)
        else:
            if ev.kind in (SPLIT_DEATH, PLAIN_DEATH):
                j = int(np.nonzero(ids == ev.subject_id)[0][0])
                keep = np.ones(len(ids), dtype=bool)
                keep[j] = False
                types, bts, ids = types[keep], bts[keep], ids[keep]
            if sum(ev.offspring):
                counts = np.asarray(ev.offspring)
                newborn_types = np.repeat(np.arange(len(counts)), counts)
                types = np.append(types, newborn_types)
                bts = np.append(bts, np.full(len(newborn_types), ev.time))
                ids = np.append(ids, ev.new_ids)
        t = ev.time
    yield t, traj.T, types, bts, ids, None


def replay_series(traj: Trajectory, fs) -> dict:
    """Recompute the functional time series from the event log alone."""
    out = {f.name: np.empty(len(traj.time_grid)) for f in fs}
    for t0, t1, types, bts, _, ev in _replay_segments(traj):
        mask = (traj.time_grid > t0 + 1e-12) & (traj.time_grid <= t1 + 1e-12) if t0 > 0 else (traj.time_grid <= t1 + 1e-12)
        for f in fs:
            for k in np.nonzero(mask)[0]:
                out[f.name][k] = float(np.sum(f(types, traj.time_grid[k] - bts))) if len(types) else 0.0
    return out


def _integrate_segments(model: RateModel, traj: Trajectory, fs, pointwise, substep: float):
    """Cumulative integral over time of sum_x pointwise(f, state_x(u), phi_u)
    for each test function, evaluated on the trajectory's time grid by
    midpoint quadrature with pieces aligned to grid times.

    ``pointwise(f, types, ages2d, phi2d)`` must return an (m, n) array.
    Returns dict name -> array on grid, plus a flag set when the substep
    is coarser than the mean inter-event gap.
    """
    grid = traj.time_grid
    acc = {f.name: 0.0 for f in fs}
    out = {f.name: np.zeros(len(grid)) for f in fs}
    imm = model.immigration
    imm_acc = 0.0
    imm_out = np.zeros(len(grid))
    done = np.zeros(len(grid), dtype=bool)

    def flush(upto):
        # record cumulative value at grid points passed so far
        for k in np.nonzero((grid <= upto + 1e-12) & ~done)[0]:
            for f in fs:
                out[f.name][k] = acc[f.name]
            imm_out[k] = imm_acc
            done[k] = True

    for t0, t1, types, bts, _, ev in _replay_segments(traj):
        if t1 <= t0:
            flush(t1)
            continue
        # piece boundaries: segment split at interior grid times
        inner = grid[(grid > t0 + 1e-12) & (grid < t1 - 1e-12)]
        bounds = np.concatenate(([t0], inner, [t1]))
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            m = max(1, int(np.ceil((hi - lo) / substep)))
            edges = np.linspace(lo, hi, m + 1)
            mids = 0.5 * (edges[:-1] + edges[1:])
            wts = np.diff(edges)
            if len(types):
                ages = mids[:, None] - bts[None, :]
                if model.n_dependence:
                    phi = np.stack(
                        [np.sum(g(np.broadcast_to(types, ages.shape), ages), axis=1) for g in model.dependence],
                        axis=1,
                    ) / traj.K
                else:
                    phi = np.zeros((m, 0))
                for f in fs:
                    vals = pointwise(f, np.broadcast_to(types, ages.shape), ages, phi)
                    acc[f.name] += float(np.sum(np.sum(vals, axis=1) * wts))
                if imm is not None:
                    rates = np.array([float(imm.rate(phi[r], mids[r])) for r in range(m)])
                    imm_acc += float(np.sum(rates * wts))
            flush(hi)
    flush(traj.T)
    n_ev = max(1, len(traj.events))
    warn = substep > traj.T / n_ev
    return out, imm_out, warn


@dataclass
class PathFunctional:
    """Time series of a pathwise functional on the trajectory grid."""

    times: np.ndarray
    values: dict  # test-function name -> array
    quadrature_warning: bool = False


def martingale_residual(model: RateModel, traj: Trajectory, fs, substep: float | None = None) -> PathFunctional:
    """Residual M_t = (f,S_t) - (f,S_0) - int (L f, S_u) du on the grid.

    With immigration present, the compensator also subtracts the
    immigration drift g * batch_mean * (f, kernel), so the residual is a
    martingale for the full dynamics.
    """
    if substep is None:
        substep = traj.T / 10_000
    fvals = replay_series(traj, fs)

    def drift(f, types, ages, phi):
        return generator_apply(model, f, types, ages, phi)

    comp, imm_cum, warn = _integrate_segments(model, traj, fs, drift, substep)
    values = {}
    for f in fs:
        res = fvals[f.name] - fvals[f.name][0] - comp[f.name]
        if model.immigration is not None:
            res = res - model.immigration.batch_mean() * model.immigration.kernel.pair(f) * imm_cum
        values[f.name] = res
    return PathFunctional(times=traj.time_grid, values=values, quadrature_warning=warn)


def empirical_qv(model: RateModel, traj: Trajectory, fs, substep: float | None = None):
    """Optional [M]_t (sum of squared jumps) and predictable <M>_t.

    Returns a pair of PathFunctional on the trajectory grid.
    """
    if substep is None:
        substep = traj.T / 10_000
    grid = traj.time_grid
    f0s = {f.name: f.at_birth(model.n_types) for f in fs}
    sq = {f.name: np.zeros(len(grid)) for f in fs}
    acc = {f.name: 0.0 for f in fs}
    done = np.zeros(len(grid), dtype=bool)

    def flush(upto):
        for k in np.nonzero((grid <= upto + 1e-12) & ~done)[0]:
            for f in fs:
                sq[f.name][k] = acc[f.name]
            done[k] = True

    for t0, t1, types, bts, ids, ev in _replay_segments(traj):
        # grid points up to and including t1 see the pre-event value
        flush(t1)
        if ev is None:
            continue
        for f in fs:
            if ev.kind == IMMIGRATION:
                jump = float(sum(f(np.asarray(i), np.asarray(a)) for i, a in ev.immigrants))
            else:
                jump = float(np.dot(f0s[f.name], np.asarray(ev.offspring))) if ev.offspring else 0.0
                if ev.kind in (SPLIT_DEATH, PLAIN_DEATH):
                    j = int(np.nonzero(ids == ev.subject_id)[0][0])
                    jump -= float(f(types[j], ev.time - bts[j]))
            acc[f.name] += jump * jump
    flush(traj.T)
    bracket = PathFunctional(times=grid, values=sq)

    def qv(f, types, ages, phi):
        return qv_integrand(model, f, types, ages, phi)

    comp, imm_cum, warn = _integrate_segments(model, traj, fs, qv, substep)
    if model.immigration is not None:
        imm = model.immigration
        for f in fs:
            kf = imm.kernel.pair(f)
            # batch of size Z with i.i.d. placements: E[(sum f)^2] decomposes
            # into m~ * (f^2, kernel) + (v~ - m~) * (f, kernel)^2
            f2 = TestFunction(name="sq", fn=lambda i, v, _f=f: _f.fn(i, v) ** 2)
            kf2 = imm.kernel.pair(f2)
            comp[f.name] = comp[f.name] + (imm.batch_mean() * kf2 + (imm.batch_second() - imm.batch_mean()) * kf * kf) * imm_cum
    predictable = PathFunctional(times=grid, values={f.name: comp[f.name] for f in fs}, quadrature_warning=warn)
    return bracket, predictable
