"""Unit tests for the Gaussian fluctuation moments and replicate diagnostics."""

import math

import numpy as np
import pytest

from agebranch.builtin_models import constant_rates, pure_death
from agebranch.functions import constant
from agebranch.fluctuations import (
    clt_report,
    estimate_Z,
    grid_test_vector,
    limit_time_grid,
    lyapunov_moments,
)
from agebranch.limits import CohortMeasure, solve_limit


def _predicted_variance(model, x0, T, da, box, f):
    grid = limit_time_grid(T, da)
    limit = solve_limit(model, CohortMeasure.from_cohorts([(0, 0.0, x0)]), T, dt=da / 2,
                        time_grid=grid)
    n_cells = int(round(box / da))
    fields = lyapunov_moments(model, limit, da=da, dt=da, T=T, n_cells=n_cells,
                              snapshot_times=[T])
    field = fields[-1]
    for fld in fields:
        fld.check_psd()
    return field.variance_of(grid_test_vector(field, f)), limit


class TestVarianceOracles:
    def test_pure_death_binomial_variance(self):
        # survival thinning: Var (1, Z_T) = x0 p (1 - p), p = e^{-hT}
        h, T, x0 = 0.6, 1.0, 1.0
        model = pure_death(h=h)
        pred, _ = _predicted_variance(model, x0, T, da=0.01, box=2.0, f=constant(1.0))
        p = math.exp(-h * T)
        assert pred == pytest.approx(x0 * p * (1 - p), rel=1e-3)

    def test_linear_birth_death_variance_ode(self):
        # Var (1, Z_T) = x0 (b+h)/(b-h) e^{rT}(e^{rT}-1), r = b - h
        b, h, T, x0 = 0.5, 0.3, 1.0, 1.0
        model = constant_rates(b=b, h=h)
        pred, _ = _predicted_variance(model, x0, T, da=0.01, box=2.0, f=constant(1.0))
        r = b - h
        want = x0 * (b + h) / r * math.exp(r * T) * (math.exp(r * T) - 1.0)
        assert pred == pytest.approx(want, rel=1e-3)


class TestReplicateMachinery:
    def test_estimate_Z_is_deterministic(self):
        model = constant_rates(b=0.5, h=0.3)
        cohorts = [(0, 0.0, 1.0)]
        limit = solve_limit(model, CohortMeasure.from_cohorts(cohorts), 1.0, dt=1e-3,
                            time_grid=np.linspace(0, 1, 11))
        kw = dict(model=model, initial_cohorts=cohorts, K_list=[50], replicates=3,
                  fs=(constant(1.0),), T=1.0, limit=limit, master_seed=99,
                  time_grid=np.linspace(0, 1, 11))
        a = estimate_Z(**kw)[50]
        b = estimate_Z(**kw)[50]
        assert np.array_equal(a.values, b.values)
        assert a.seeds == b.seeds

    def test_clt_report_full_pass_on_pure_death(self):
        h, T = 0.6, 1.0
        model = pure_death(h=h)
        cohorts = [(0, 0.0, 1.0)]
        da = 0.02
        pred, limit = _predicted_variance(model, 1.0, T, da=da, box=2.0, f=constant(1.0))
        samples = estimate_Z(model, cohorts, [200, 800], replicates=200,
                             fs=(constant(1.0),), T=T, limit=limit, master_seed=7,
                             time_grid=limit_time_grid(T, da))
        verdicts = clt_report(samples, {"const[1]": pred}, variance_tol=0.15)
        v = verdicts[0]
        assert v.flatness_ok and v.variance_ok and v.gaussian_ok and v.passed

    def test_degenerate_noise_is_skipped(self):
        # no deaths, no births: Z is identically zero and the check skips
        model = pure_death(h=0.0)
        cohorts = [(0, 0.0, 1.0)]
        T, da = 0.5, 0.05
        pred, limit = _predicted_variance(model, 1.0, T, da=da, box=1.5, f=constant(1.0))
        assert pred == pytest.approx(0.0, abs=1e-12)
        samples = estimate_Z(model, cohorts, [100], replicates=5, fs=(constant(1.0),),
                             T=T, limit=limit, master_seed=1,
                             time_grid=limit_time_grid(T, da))
        verdicts = clt_report(samples, {"const[1]": pred})
        assert verdicts[0].skipped and verdicts[0].passed
