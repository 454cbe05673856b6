"""Unit tests for the thinning simulator, event replay and pathwise checks."""

import dataclasses
import math

import numpy as np
import pytest

from agebranch.builtin_models import constant_rates, pure_death
from agebranch.functions import age_power, constant, smooth_window
from agebranch.model import Bounds, DiscreteArrivalKernel, Immigration
from agebranch.offspring import DeterministicOffspring
from agebranch.rng import stream
from agebranch.simulate import (
    BoundViolationError,
    empirical_qv,
    martingale_residual,
    replay_series,
    simulate,
)
from agebranch.states import PopulationMeasure


def _mean_over_reps(model, initial, K, T, seeds, f):
    vals = []
    for s in seeds:
        traj = simulate(model, initial, K=K, T=T, seed=s, time_grid=[T], test_functions=(f,))
        vals.append(traj.series[f.name][-1])
    return np.mean(vals), np.std(vals, ddof=1) / math.sqrt(len(vals))


class TestMeanOracles:
    def test_linear_birth_death_mean_growth(self):
        # E N_T = N_0 exp((b m - h) T) for constant rates
        b, h, T = 0.6, 0.4, 1.5
        model = constant_rates(b=b, h=h)
        initial = PopulationMeasure.from_cohorts([(0, 0.0, 50)])
        seeds = range(400)
        mean, se = _mean_over_reps(model, initial, 50, T, seeds, constant(1.0))
        expected = 50 * math.exp((b - h) * T)
        assert abs(mean - expected) < 3 * se + 1e-9

    def test_pure_death_survival_matches_binomial(self):
        # each of n individuals survives independently with prob e^{-hT}
        h, T, n = 0.7, 1.0, 80
        model = pure_death(h=h)
        initial = PopulationMeasure.from_cohorts([(0, 0.0, n)])
        counts = []
        for s in range(300):
            traj = simulate(model, initial, K=n, T=T, seed=s, time_grid=[T],
                            test_functions=(constant(1.0),))
            counts.append(traj.series["const[1]"][-1])
        p = math.exp(-h * T)
        mean, var = n * p, n * p * (1 - p)
        assert abs(np.mean(counts) - mean) < 3 * math.sqrt(var / 300)
        assert abs(np.var(counts, ddof=1) - var) < 0.25 * var

    def test_age_dependent_death_thins_old_individuals_faster(self):
        model = pure_death(h=1.0)
        model = dataclasses.replace(
            model,
            death_rate=lambda i, v, phi: np.minimum(v, 2.0),
            bounds=Bounds(b_max=0.0, h_max=2.0),
        )
        initial = PopulationMeasure.from_cohorts([(0, 0.1, 200), (0, 1.9, 200)])
        young_w = smooth_window(0.0, 1.0)
        old_w = smooth_window(2.0, 3.0)
        young, old = 0.0, 0.0
        for s in range(60):
            traj = simulate(model, initial, K=400, T=0.5, seed=s, time_grid=[0.5],
                            test_functions=(young_w, old_w))
            young += traj.series[young_w.name][-1]
            old += traj.series[old_w.name][-1]
        assert old < young

    def test_immigration_only_mean(self):
        # no branching, absolute arrival intensity g: N_T ~ Poisson(g T)
        g, T, K = 3.0, 2.0, 100
        model = pure_death(h=0.0)
        model = dataclasses.replace(
            model,
            immigration=Immigration(
                rate=lambda phi, t: g,
                batch_sizes=((1, 1.0),),
                kernel=DiscreteArrivalKernel(atoms=((1.0, 0, 0.0),)),
            ),
            bounds=Bounds(b_max=0.0, h_max=0.0, g_max=g),
        )
        initial = PopulationMeasure.from_cohorts([])
        totals = [
            simulate(model, initial, K=K, T=T, seed=s, time_grid=[T],
                     test_functions=(constant(1.0),)).series["const[1]"][-1]
            for s in range(200)
        ]
        lam = g * T
        assert abs(np.mean(totals) - lam) < 3 * math.sqrt(lam / 200)


class TestReplayAndDeterminism:
    def test_same_seed_same_path(self):
        model = constant_rates(b=0.8, h=0.5)
        initial = PopulationMeasure.from_cohorts([(0, 0.0, 30)])
        grid = np.linspace(0, 1, 6)
        t1 = simulate(model, initial, K=30, T=1.0, seed=7, time_grid=grid,
                      test_functions=(constant(1.0), age_power(1)))
        t2 = simulate(model, initial, K=30, T=1.0, seed=7, time_grid=grid,
                      test_functions=(constant(1.0), age_power(1)))
        assert len(t1.events) == len(t2.events)
        for name in t1.series:
            assert np.array_equal(t1.series[name], t2.series[name])

    def test_replay_reproduces_recorded_series(self):
        model = constant_rates(b=0.8, h=0.5)
        initial = PopulationMeasure.from_cohorts([(0, 0.3, 25)])
        grid = np.linspace(0, 1, 11)
        fs = (constant(1.0), age_power(1))
        traj = simulate(model, initial, K=25, T=1.0, seed=11, time_grid=grid,
                        test_functions=fs)
        replayed = replay_series(traj, fs)
        for f in fs:
            assert np.allclose(traj.series[f.name], replayed[f.name], atol=1e-12)


class TestPathwiseChecks:
    def test_martingale_residual_centered(self):
        model = constant_rates(b=0.6, h=0.4)
        initial = PopulationMeasure.from_cohorts([(0, 0.0, 100)])
        fs = (constant(1.0), age_power(1))
        finals = {f.name: [] for f in fs}
        for s in range(120):
            traj = simulate(model, initial, K=100, T=1.0, seed=s,
                            time_grid=np.linspace(0, 1, 11), test_functions=fs)
            res = martingale_residual(model, traj, fs, substep=50)
            for f in fs:
                finals[f.name].append(res.values[f.name][-1])
        for name, vals in finals.items():
            se = np.std(vals, ddof=1) / math.sqrt(len(vals))
            assert abs(np.mean(vals)) < 3.5 * se, name

    def test_empirical_qv_tracks_predictable_qv(self):
        model = constant_rates(b=0.6, h=0.4)
        initial = PopulationMeasure.from_cohorts([(0, 0.0, 200)])
        f = constant(1.0)
        diffs = []
        for s in range(100):
            traj = simulate(model, initial, K=200, T=1.0, seed=s,
                            time_grid=np.linspace(0, 1, 6), test_functions=(f,))
            bracket, predictable = empirical_qv(model, traj, (f,), substep=50)
            diffs.append(bracket.values[f.name][-1] - predictable.values[f.name][-1])
        se = np.std(diffs, ddof=1) / math.sqrt(len(diffs))
        assert abs(np.mean(diffs)) < 3.5 * se

    def test_event_accounting_consistency(self):
        from agebranch.simulate import BEARING, IMMIGRATION

        model = constant_rates(b=0.7, h=0.5, splitting_law=DeterministicOffspring((2,)))
        initial = PopulationMeasure.from_cohorts([(0, 0.0, 40)])
        traj = simulate(model, initial, K=40, T=1.0, seed=3, time_grid=[1.0],
                        test_functions=(constant(1.0),))
        n = 40
        for ev in traj.events:
            n += len(ev.new_ids)
            if ev.kind not in (BEARING, IMMIGRATION):
                n -= 1
        assert n == traj.series["const[1]"][-1]


class TestGuards:
    def test_declared_bound_violation_raises(self):
        model = constant_rates(b=1.0, h=0.2)
        model = dataclasses.replace(model, bounds=Bounds(b_max=0.5, h_max=0.2))
        initial = PopulationMeasure.from_cohorts([(0, 0.0, 20)])
        with pytest.raises(BoundViolationError):
            simulate(model, initial, K=20, T=1.0, seed=0, time_grid=[1.0])

    def test_population_cap_guard(self):
        from agebranch.simulate import PopulationCapError

        model = constant_rates(b=5.0, h=0.0)
        initial = PopulationMeasure.from_cohorts([(0, 0.0, 100)])
        with pytest.raises(PopulationCapError):
            simulate(model, initial, K=100, T=4.0, seed=0, time_grid=[4.0], pop_cap=500)
