"""Unit tests for the pair-formation simulator and its coupled PDE limit."""

import math

import numpy as np
import pytest

from agebranch.builtin_models import serial_monogamy
from agebranch.functions import F, FM, M, headcount, pair_constant, pair_type_indicator
from agebranch.monogamy import (
    IntegrityError,
    MonogamyEvent,
    MonogamyTrajectory,
    PairPopulation,
    TwoSexDensity,
    _apply_event,
    accounting_series,
    monogamy_qv,
    monogamy_residual,
    simulate_monogamy,
    solve_limit_monogamy,
)


def _two_singles():
    return PairPopulation.from_cohorts([(F, 0.5, None, 1), (M, None, 0.5, 1)])


class TestPairSimulator:
    def test_marriage_time_is_exponential(self):
        # one female + one male, only marriages: waiting time ~ Exp(rho/K)
        rho, K = 2.0, 4.0
        model = serial_monogamy(b=0.0, h_f=0.0, h_m=0.0, sep=0.0, rho=rho)
        waits = []
        for s in range(600):
            traj = simulate_monogamy(model, _two_singles(), K=K, T=50.0, seed=s,
                                     time_grid=[50.0])
            assert len(traj.events) == 1 and traj.events[0].kind == "MARRIAGE"
            waits.append(traj.events[0].time)
        mean = np.mean(waits)
        want = K / rho
        assert abs(mean - want) < 3 * want / math.sqrt(600)

    def test_dissolution_restores_distinct_singles(self):
        # start from a couple, only separations: two singles with fresh ids
        model = serial_monogamy(b=0.0, h_f=0.0, h_m=0.0, sep=1.0, rho=0.0)
        init = PairPopulation.from_cohorts([(FM, 0.4, 0.6, 1)])
        traj = simulate_monogamy(model, init, K=1.0, T=30.0, seed=5, time_grid=[30.0])
        seps = [ev for ev in traj.events if ev.kind == "SEPARATION"]
        assert seps, "expected at least one separation"
        state = traj.initial.copy()
        _apply_event(state, seps[0])
        assert sorted(state.types.tolist()) == [F, M]
        assert state.ids[0] != state.ids[1]
        assert state.ids.min() > traj.initial.ids[0]  # fresh member ids
        # the audit replays every event and checks the head-count ledger
        _, xs, _ = accounting_series(traj)
        assert xs[0] == 2

    def test_accounting_audit_clean_on_full_model(self):
        model = serial_monogamy(b=1.0, h_f=0.3, h_m=0.35, sep=0.5, rho=2.0, theta=6.0)
        init = PairPopulation.from_cohorts(
            [(F, 0.3, None, 10), (M, None, 0.1, 10), (FM, 0.5, 0.7, 5)]
        )
        traj = simulate_monogamy(model, init, K=30.0, T=3.0, seed=1, time_grid=[3.0])
        times, xs, deltas = accounting_series(traj)
        assert len(times) == traj.n_events
        assert xs[-1] == init.headcount() + deltas.sum()

    def test_tampered_event_trips_audit(self):
        model = serial_monogamy(b=1.0, h_f=0.3, h_m=0.35, sep=0.5, rho=2.0)
        init = PairPopulation.from_cohorts([(F, 0.3, None, 10), (M, None, 0.1, 10)])
        traj = simulate_monogamy(model, init, K=20.0, T=2.0, seed=2, time_grid=[2.0])
        assert traj.n_events > 0
        ev = traj.events[0]
        bad = MonogamyEvent(time=ev.time, kind="F_DEATH", subject_id=-12345)
        tampered = MonogamyTrajectory(
            initial=traj.initial, events=[bad] + traj.events[1:], K=traj.K, T=traj.T,
            seed=traj.seed, time_grid=traj.time_grid, series=traj.series,
        )
        with pytest.raises(IntegrityError):
            accounting_series(tampered)

    def test_all_ids_unique_over_path(self):
        model = serial_monogamy(b=1.2, h_f=0.2, h_m=0.2, sep=0.6, rho=3.0, theta=8.0)
        init = PairPopulation.from_cohorts(
            [(F, 0.0, None, 8), (M, None, 0.0, 8), (FM, 0.2, 0.2, 4)]
        )
        traj = simulate_monogamy(model, init, K=20.0, T=3.0, seed=9, time_grid=[3.0])
        seen = set(traj.initial.ids) | set(traj.initial.fid[traj.initial.fid >= 0]) \
            | set(traj.initial.mid[traj.initial.mid >= 0])
        for ev in traj.events:
            if ev.kind in ("BEARING", "MARRIAGE"):
                for i in ev.new_ids:
                    assert i not in seen
                    seen.add(i)


class TestPairPathwiseChecks:
    @staticmethod
    def _small_traj(seed):
        model = serial_monogamy(b=1.0, h_f=0.3, h_m=0.35, sep=0.5, rho=2.0, theta=6.0)
        init = PairPopulation.from_cohorts(
            [(F, 0.3, None, 30), (M, None, 0.1, 30), (FM, 0.5, 0.7, 15)]
        )
        grid = np.linspace(0, 1, 6)
        return model, simulate_monogamy(model, init, K=300.0, T=1.0, seed=seed,
                                        time_grid=grid)

    def test_residual_centered(self):
        fs = (headcount(), pair_type_indicator(FM))
        finals = {f.name: [] for f in fs}
        model = None
        for s in range(80):
            model, traj = self._small_traj(s)
            res = monogamy_residual(model, traj, fs, substep=1 / 200)
            for f in fs:
                finals[f.name].append(res[f.name][-1])
        for name, vals in finals.items():
            se = np.std(vals, ddof=1) / math.sqrt(len(vals))
            assert abs(np.mean(vals)) < 3.5 * se, name

    def test_qv_bracket_tracks_compensator(self):
        f = pair_constant(1.0)
        diffs = []
        for s in range(60):
            model, traj = self._small_traj(1000 + s)
            sq, comp = monogamy_qv(model, traj, (f,), substep=1 / 200)
            diffs.append(sq[f.name][-1] - comp[f.name][-1])
        se = np.std(diffs, ddof=1) / math.sqrt(len(diffs))
        assert abs(np.mean(diffs)) < 3.5 * se


class TestCoupledPDE:
    @staticmethod
    def _bump(nodes, lo, hi):
        out = np.zeros_like(nodes)
        inside = (nodes > lo) & (nodes < hi)
        x = nodes[inside]
        out[inside] = np.exp(-1.0 / ((x - lo) * (hi - x)))
        return out

    def _initial(self, da, box):
        nodes = np.arange(int(round(box / da)) + 1) * da
        b = self._bump(nodes, 0.2, 1.2)
        return TwoSexDensity(a_f=b.copy(), a_m=b.copy(),
                             a_fm=np.zeros((len(nodes), len(nodes))), da=da)

    def test_marriage_only_conserves_headcount(self):
        model = serial_monogamy(b=0.0, h_f=0.0, h_m=0.0, sep=0.0, rho=2.0)
        init = self._initial(0.01, 3.0)
        traj = solve_limit_monogamy(model, init, T=1.0, time_grid=[0.0, 1.0])
        x0 = traj.at(0.0).headcount()
        x1 = traj.at(1.0).headcount()
        assert abs(x1 - x0) < 1e-12 * max(1.0, x0)
        # couples actually formed
        assert traj.at(1.0).pair(pair_type_indicator(FM)) > 0.0

    def test_symmetric_model_keeps_fields_equal(self):
        model = serial_monogamy(b=1.0, h_f=0.3, h_m=0.3, sep=0.5, rho=2.0, theta=6.0)
        init = self._initial(0.01, 3.0)
        traj = solve_limit_monogamy(model, init, T=1.0, time_grid=[1.0])
        st = traj.at(1.0)
        gap = np.max(np.abs(st.a_f - st.a_m))
        assert gap < 1e-12
        assert np.max(np.abs(st.a_fm - st.a_fm.T)) < 1e-12

    def test_death_only_matches_closed_form(self):
        model = serial_monogamy(b=0.0, h_f=0.4, h_m=0.7, sep=0.0, rho=0.0)
        init = self._initial(0.005, 3.0)
        f0 = init.pair(pair_type_indicator(F))
        m0 = init.pair(pair_type_indicator(M))
        traj = solve_limit_monogamy(model, init, T=1.0, time_grid=[1.0])
        st = traj.at(1.0)
        assert st.pair(pair_type_indicator(F)) == pytest.approx(f0 * math.exp(-0.4), rel=1e-5)
        assert st.pair(pair_type_indicator(M)) == pytest.approx(m0 * math.exp(-0.7), rel=1e-5)

    def test_grid_refinement_converges(self):
        model = serial_monogamy(b=1.0, h_f=0.3, h_m=0.3, sep=0.5, rho=2.0, theta=6.0)
        vals = []
        for da in (0.04, 0.02, 0.01):
            traj = solve_limit_monogamy(model, self._initial(da, 3.0), T=1.0,
                                        time_grid=[1.0])
            vals.append(traj.at(1.0).headcount())
        # successive differences shrink under refinement
        assert abs(vals[2] - vals[1]) < abs(vals[1] - vals[0])
