"""Unit tests for offspring laws, rate models, test functions and RNG."""

import numpy as np
import pytest

from agebranch.builtin_models import constant_rates, logistic_birth_death, two_sex_logistic
from agebranch.functions import (
    FM,
    age_power,
    constant,
    headcount,
    pair_from_singles,
    pair_type_indicator,
    smooth_window,
    type_indicator,
)
from agebranch.model import (
    DiscreteArrivalKernel,
    birth_intensity_means,
    pair,
    qv_integrand,
)
from agebranch.offspring import DeterministicOffspring, MultinomialLitter, TruncatedPoissonOffspring
from agebranch.rng import stream
from agebranch.states import PopulationMeasure


class TestOffspringLaws:
    def test_deterministic_moments(self):
        law = DeterministicOffspring((2, 1))
        assert np.allclose(law.mean(), [2.0, 1.0])
        assert np.allclose(law.second_moment(), [[4.0, 2.0], [2.0, 1.0]])
        assert law.max_total == 3

    def test_truncated_poisson_sample_moments(self):
        law = TruncatedPoissonOffspring(rates=(1.3,), cap=6)
        rng = stream(1)
        draws = np.array([law.sample(rng)[0] for _ in range(20_000)])
        assert draws.max() <= 6
        assert abs(draws.mean() - law.mean()[0]) < 0.03
        assert abs((draws**2).mean() - law.second_moment()[0, 0]) < 0.1

    def test_multinomial_litter_moments(self):
        law = MultinomialLitter(size_pmf=((0, 0.2), (2, 0.8)), type_probs=(0.3, 0.7))
        rng = stream(2)
        draws = np.array([law.sample(rng) for _ in range(20_000)])
        assert np.allclose(draws.mean(axis=0), law.mean(), atol=0.03)
        emp_second = np.einsum("ni,nj->ij", draws, draws) / len(draws)
        assert np.allclose(emp_second, law.second_moment(), atol=0.05)

    def test_multinomial_pmf_must_normalize(self):
        with pytest.raises(ValueError):
            MultinomialLitter(size_pmf=((1, 0.5),), type_probs=(1.0,))


class TestTestFunctions:
    def test_age_power_and_deriv(self):
        f = age_power(2)
        types = np.zeros(3, dtype=int)
        ages = np.array([0.0, 1.0, 2.0])
        assert np.allclose(f(types, ages), [0.0, 1.0, 4.0])
        assert np.allclose(f.deriv(types, ages), [0.0, 2.0, 4.0])

    def test_smooth_window_support_and_smoothness(self):
        f = smooth_window(1.0, 2.0)
        types = np.zeros(5, dtype=int)
        ages = np.array([0.0, 0.99, 1.5, 2.01, 5.0])
        vals = f(types, ages)
        assert vals[0] == 0.0 and vals[-1] == 0.0
        assert vals[2] == pytest.approx(1.0)
        # finite differences agree with the declared derivative
        a = np.linspace(0.8, 2.2, 4001)
        num = np.gradient(f(np.zeros_like(a, dtype=int), a), a)
        assert np.max(np.abs(num - f.deriv(np.zeros_like(a, dtype=int), a))) < 0.05

    def test_pair_function_dispatch(self):
        g = pair_type_indicator(FM)
        types = np.array([0, 1, 2])
        v = np.array([1.0, np.inf, 2.0])
        w = np.array([np.inf, 3.0, 4.0])
        assert np.allclose(g(types, v, w), [0.0, 0.0, 1.0])
        hc = headcount()
        assert np.allclose(hc(types, v, w), [1.0, 1.0, 2.0])

    def test_pair_from_singles_is_marriage_neutral(self):
        g = pair_from_singles(age_power(1), constant(2.0))
        # couple value equals the sum of the would-be single values
        assert g.f_couple(np.asarray(1.5), np.asarray(7.0)) == pytest.approx(
            g.f_single_f(np.asarray(1.5)) + g.f_single_m(np.asarray(7.0))
        )


class TestRateModel:
    def test_birth_intensity_means_combines_laws(self):
        model = constant_rates(
            b=0.5, h=0.3,
            bearing_law=DeterministicOffspring((2,)),
            splitting_law=DeterministicOffspring((1,)),
        )
        n = birth_intensity_means(model, np.array([0]), np.array([1.0]), model.zero_phi())
        assert n.shape == (1, 1)
        assert n[0, 0] == pytest.approx(0.5 * 2 + 0.3 * 1)

    def test_qv_integrand_linear_case(self):
        model = constant_rates(0.5, 0.3)
        f = constant(1.0)
        val = qv_integrand(model, f, np.array([0]), np.array([0.7]), model.zero_phi())
        # f=1: w + h - 2 h m_split = b * 1 + h
        assert val.item() == pytest.approx(0.8)

    def test_logistic_rate_drops_with_density(self):
        model = logistic_birth_death(beta=1.0, theta=2.0, h=0.1)
        lo = model.birth_rate(np.array([0]), np.array([0.0]), np.array([0.0]))
        hi = model.birth_rate(np.array([0]), np.array([0.0]), np.array([4.0]))
        assert lo.item() == pytest.approx(1.0)
        assert hi.item() == pytest.approx(0.0)

    def test_two_sex_only_females_bear(self):
        model = two_sex_logistic(0.9, 5.0, 0.2, 0.3)
        b = model.birth_rate(np.array([0, 1]), np.array([1.0, 1.0]), np.array([0.0]))
        assert b[0] > 0.0 and b[1] == 0.0


class TestArrivalKernel:
    def test_pairing_is_exact_mixture(self):
        kern = DiscreteArrivalKernel(atoms=((0.25, 0, 1.0), (0.75, 0, 3.0)))
        assert kern.pair(age_power(1)) == pytest.approx(0.25 * 1.0 + 0.75 * 3.0)

    def test_probabilities_must_normalize(self):
        with pytest.raises(ValueError):
            DiscreteArrivalKernel(atoms=((0.5, 0, 1.0),))


class TestPopulationMeasure:
    def test_from_cohorts_ages(self):
        pop = PopulationMeasure.from_cohorts([(0, 1.5, 2), (1, 0.0, 1)])
        assert pop.ids.tolist() == [0, 1, 2]
        ages = pop.clock - pop.birth_times
        assert np.allclose(ages, [1.5, 1.5, 0.0])

    def test_pairing_counts(self):
        pop = PopulationMeasure.from_cohorts([(0, 1.0, 3), (1, 2.0, 2)])
        assert pair(constant(1.0), pop) == pytest.approx(5.0)
        assert pair(type_indicator(1), pop) == pytest.approx(2.0)


class TestCounterStreams:
    def test_same_key_same_draws(self):
        a = stream(42, 3, 7).uniform(size=5)
        b = stream(42, 3, 7).uniform(size=5)
        assert np.array_equal(a, b)

    def test_distinct_keys_differ(self):
        a = stream(42, 3, 7).uniform(size=5)
        b = stream(42, 3, 8).uniform(size=5)
        c = stream(43, 3, 7).uniform(size=5)
        assert not np.array_equal(a, b)
        assert not np.array_equal(a, c)
