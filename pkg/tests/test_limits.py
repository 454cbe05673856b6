"""Unit tests for the deterministic limit solvers and the renewal oracle."""

import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from agebranch.builtin_models import constant_rates, logistic_birth_death, pure_death
from agebranch.functions import age_power, constant, smooth_window
from agebranch.limits import (
    CohortMeasure,
    DensityField,
    mild_form_values,
    solve_density,
    solve_limit,
)


class TestCohortSolver:
    def test_pure_death_exponential_decay(self):
        model = pure_death(h=0.6)
        initial = CohortMeasure.from_cohorts([(0, 0.2, 2.0)])
        traj = solve_limit(model, initial, T=1.0, dt=1e-3, time_grid=[0.0, 0.5, 1.0])
        got = traj.series(constant(1.0))
        want = 2.0 * np.exp(-0.6 * np.array([0.0, 0.5, 1.0]))
        assert np.allclose(got, want, rtol=1e-8)

    def test_transport_is_exact(self):
        # no births/deaths: the age moment advances linearly, exactly
        model = pure_death(h=0.0)
        initial = CohortMeasure.from_cohorts([(0, 0.3, 1.0), (0, 1.1, 2.0)])
        traj = solve_limit(model, initial, T=1.0, dt=0.01, time_grid=[1.0])
        got = traj.series(age_power(1))[0]
        assert got == pytest.approx(1.3 * 1.0 + 2.1 * 2.0, abs=1e-12)

    def test_constant_rates_exponential_growth(self):
        b, h, T = 0.7, 0.3, 2.0
        model = constant_rates(b=b, h=h)
        initial = CohortMeasure.from_cohorts([(0, 0.0, 1.0)])
        traj = solve_limit(model, initial, T=T, dt=1e-3, time_grid=[T])
        assert traj.series(constant(1.0))[0] == pytest.approx(math.exp((b - h) * T), rel=1e-6)

    def test_logistic_matches_ode_oracle(self):
        # age-blind logistic: total mass solves x' = x(beta(1 - x/theta) - h)
        beta, theta, h, x0, T = 0.9, 3.0, 0.2, 0.5, 2.0
        model = logistic_birth_death(beta=beta, theta=theta, h=h)
        initial = CohortMeasure.from_cohorts([(0, 0.0, x0)])
        traj = solve_limit(model, initial, T=T, dt=1e-3, time_grid=[T])
        sol = solve_ivp(
            lambda t, x: x * (beta * max(0.0, 1.0 - x / theta) - h),
            (0.0, T), [x0], rtol=1e-10, atol=1e-12,
        )
        assert traj.series(constant(1.0))[0] == pytest.approx(sol.y[0, -1], rel=1e-5)

    def test_second_order_in_dt(self):
        model = constant_rates(b=0.7, h=0.3)
        initial = CohortMeasure.from_cohorts([(0, 0.0, 1.0)])
        exact = math.exp(0.4 * 1.0)
        errs = []
        for dt in (4e-3, 2e-3, 1e-3):
            traj = solve_limit(model, initial, T=1.0, dt=dt, time_grid=[1.0])
            errs.append(abs(traj.series(constant(1.0))[0] - exact))
        ratios = [errs[i] / errs[i + 1] for i in range(2)]
        assert min(ratios) > 3.0  # ~4 for a second-order scheme

    def test_snapshots_are_step_endpoints(self):
        # a snapshot time not commensurate with dt must still be honored
        model = pure_death(h=1.0)
        initial = CohortMeasure.from_cohorts([(0, 0.0, 1.0)])
        traj = solve_limit(model, initial, T=1.0, dt=0.3, time_grid=[0.0, 0.5, 1.0])
        assert np.allclose(traj.times, [0.0, 0.5, 1.0])
        assert traj.series(constant(1.0))[1] == pytest.approx(math.exp(-0.5), rel=1e-9)


class TestDensitySolver:
    @staticmethod
    def _bump_field(da, box, n_types=1):
        nodes = np.arange(int(round(box / da)) + 1) * da
        d = np.zeros((n_types, len(nodes)))
        lo, hi = 0.2, 1.2
        inside = (nodes > lo) & (nodes < hi)
        x = nodes[inside]
        d[0, inside] = np.exp(-1.0 / ((x - lo) * (hi - x)))
        return DensityField(d, da)

    def test_pure_transport_shifts_profile(self):
        model = pure_death(h=0.0)
        init = self._bump_field(0.01, 4.0)
        traj = solve_density(model, init, T=1.0, time_grid=[1.0])
        final = traj.at(1.0)
        shifted = np.roll(init.densities[0], 100)
        shifted[:100] = 0.0
        assert np.max(np.abs(final.densities[0] - shifted)) < 1e-12

    def test_decay_along_characteristics(self):
        model = pure_death(h=0.5)
        init = self._bump_field(0.01, 4.0)
        traj = solve_density(model, init, T=1.0, time_grid=[1.0])
        got = traj.series(constant(1.0))[0]
        assert got == pytest.approx(init.total_mass() * math.exp(-0.5), rel=1e-6)

    def test_agrees_with_cohort_solver_first_order_in_da(self):
        model = constant_rates(b=0.5, h=0.2)
        cohort_init = CohortMeasure.from_cohorts([(0, 0.5, 1.0)])
        ref = solve_limit(model, cohort_init, T=1.0, dt=1e-4, time_grid=[1.0])
        ref_val = ref.series(constant(1.0))[0]
        errs = []
        for da in (0.02, 0.01, 0.005):
            nodes = np.arange(int(round(4.0 / da)) + 1) * da
            d = np.zeros((1, len(nodes)))
            # triangle of mass 1 centered at age 0.5
            w = 0.2
            d[0] = np.maximum(0.0, 1.0 - np.abs(nodes - 0.5) / w) / w
            traj = solve_density(model, DensityField(d, da), T=1.0, time_grid=[1.0])
            errs.append(abs(traj.series(constant(1.0))[0] - ref_val))
        assert errs[-1] < errs[0]
        assert errs[-1] / ref_val < 5e-3

    def test_misaligned_dt_rejected(self):
        model = pure_death(h=0.1)
        init = self._bump_field(0.01, 2.0)
        with pytest.raises(ValueError):
            solve_density(model, init, T=1.0, dt=0.015)


class TestRenewalOracle:
    def test_constant_rates_closed_form(self):
        b, h, T = 0.7, 0.3, 1.5
        model = constant_rates(b=b, h=h)
        initial = CohortMeasure.from_cohorts([(0, 0.0, 1.0)])
        vals = mild_form_values(model, initial, T, phi=model.zero_phi(),
                                fs=(constant(1.0),), n_steps=4000)
        assert vals["const[1]"] == pytest.approx(math.exp((b - h) * T), rel=1e-6)

    def test_matches_marching_solver_on_age_structured_model(self):
        import dataclasses

        from agebranch.model import Bounds

        base = pure_death(h=0.0)
        win = smooth_window(0.5, 2.0)
        model = dataclasses.replace(
            base,
            birth_rate=lambda i, v, phi: 0.8 * win(i, v),
            death_rate=lambda i, v, phi: np.full(np.shape(v), 0.25),
            bounds=Bounds(b_max=0.8, h_max=0.25),
        )
        initial = CohortMeasure.from_cohorts([(0, 0.1, 0.7), (0, 0.9, 0.5)])
        fs = (constant(1.0), age_power(1))
        vals = mild_form_values(model, initial, T=1.5, phi=model.zero_phi(), fs=fs, n_steps=3000)
        traj = solve_limit(model, initial, T=1.5, dt=2e-4, time_grid=[1.5])
        for f in fs:
            assert vals[f.name] == pytest.approx(traj.series(f)[0], rel=1e-6)
