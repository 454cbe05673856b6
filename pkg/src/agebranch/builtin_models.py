"""Ready-made model families used by the experiments and the test suite.

Every family is a function returning a fully-bounded RateModel (or the
pair-formation analogue); rate callables broadcast over array inputs as
required by the simulator and the solvers.
"""

from __future__ import annotations

import numpy as np

from .functions import constant, headcount, smooth_window, type_indicator
from .model import Bounds, RateModel
from .monogamy import MonogamyBounds, MonogamyModel
from .offspring import DeterministicOffspring, MultinomialLitter, TruncatedPoissonOffspring

__all__ = [
    "phi_component",
    "constant_rates",
    "pure_death",
    "binary_splitting",
    "logistic_birth_death",
    "two_sex_logistic",
    "serial_monogamy",
]


def phi_component(phi, j, ages):
    """Pick dependence component j, shaped to broadcast against ages."""
    phi = np.asarray(phi, dtype=float)
    if phi.ndim <= 1:
        return phi[j] if phi.ndim == 1 else float(phi)
    return phi[..., j, None]


def _const_rate(value: float):
    def rate(types, ages, phi):
        return np.full(np.broadcast(types, ages).shape, float(value))

    return rate


def _zero_dphi(d: int):
    def dphi(types, ages, phi):
        return np.zeros(np.broadcast(types, ages).shape + (d,))

    return dphi


def constant_rates(
    b: float,
    h: float,
    bearing_law=None,
    splitting_law=None,
    n_types: int = 1,
) -> RateModel:
    """Age- and population-independent intensities (linear branching)."""
    bearing = bearing_law if bearing_law is not None else DeterministicOffspring(tuple([1] + [0] * (n_types - 1)))
    splitting = splitting_law if splitting_law is not None else DeterministicOffspring((0,) * n_types)
    return RateModel(
        n_types=n_types,
        birth_rate=_const_rate(b),
        death_rate=_const_rate(h),
        bearing_law=bearing,
        splitting_law=splitting,
        bounds=Bounds(
            b_max=b,
            h_max=h,
            m_max=float(max(bearing.mean().max(initial=0.0), splitting.mean().max(initial=0.0))),
            gamma_max=float(
                max(bearing.second_moment().max(initial=0.0), splitting.second_moment().max(initial=0.0))
            ),
            xi_max=max(bearing.max_total, splitting.max_total),
        ),
        dependence=(),
        birth_rate_dphi=_zero_dphi(0),
        death_rate_dphi=_zero_dphi(0),
    )


def pure_death(h: float, n_types: int = 1) -> RateModel:
    return constant_rates(0.0, h, DeterministicOffspring((0,) * n_types), DeterministicOffspring((0,) * n_types), n_types)


def binary_splitting(h: float) -> RateModel:
    """No bearing; each death splits into exactly two newborns."""
    return constant_rates(0.0, h, DeterministicOffspring((0,)), DeterministicOffspring((2,)))


def logistic_birth_death(beta: float, theta: float, h: float, bearing_law=None) -> RateModel:
    """Single type; birth rate beta * max(0, 1 - X/theta) where X is the
    scaled total mass; constant death rate."""
    bearing = bearing_law if bearing_law is not None else DeterministicOffspring((1,))
    splitting = DeterministicOffspring((0,))

    def b(types, ages, phi):
        x = phi_component(phi, 0, ages)
        return beta * np.maximum(0.0, 1.0 - x / theta) * np.ones(np.broadcast(types, ages).shape)

    def b_dphi(types, ages, phi):
        x = phi_component(phi, 0, ages)
        slope = np.where(1.0 - x / theta > 0.0, -beta / theta, 0.0)
        return (slope * np.ones(np.broadcast(types, ages).shape))[..., None]

    return RateModel(
        n_types=1,
        birth_rate=b,
        death_rate=_const_rate(h),
        bearing_law=bearing,
        splitting_law=splitting,
        bounds=Bounds(
            b_max=beta,
            h_max=h,
            m_max=float(bearing.mean().max()),
            gamma_max=float(bearing.second_moment().max()),
            xi_max=bearing.max_total,
        ),
        dependence=(constant(1.0),),
        birth_rate_dphi=b_dphi,
        death_rate_dphi=_zero_dphi(1),
    )


def serial_monogamy(
    b: float,
    h_f: float,
    h_m: float,
    sep: float,
    rho: float,
    theta: float | None = None,
    p_female: float = 0.5,
) -> MonogamyModel:
    """Pair-formation family with age-independent rates.

    Couples and single females bear single newborns (female with
    probability ``p_female``); optional logistic damping of the bearing
    rate by the scaled head count with carrying capacity ``theta``.
    Marriage happens at constant per-pair rate ``rho`` (scaled by 1/K),
    couples separate at rate ``sep``; deaths are constant per sex."""
    litter = MultinomialLitter(size_pmf=((1, 1.0),), type_probs=(p_female, 1.0 - p_female))

    def const_pair(value):
        def rate(v, w, phi):
            return np.full(np.broadcast(np.asarray(v), np.asarray(w)).shape, float(value))

        return rate

    if theta is None:
        bearing = const_pair(b)
        dependence = ()
    else:
        def bearing(v, w, phi):
            x = float(np.asarray(phi, dtype=float).reshape(-1)[0])
            return np.full(
                np.broadcast(np.asarray(v), np.asarray(w)).shape,
                b * max(0.0, 1.0 - x / theta),
            )

        dependence = (headcount(),)

    return MonogamyModel(
        bearing_rate=bearing,
        death_rate_f=const_pair(h_f),
        death_rate_m=const_pair(h_m),
        separation_rate=const_pair(sep),
        marriage_rate=const_pair(rho),
        litter_law=litter,
        bounds=MonogamyBounds(
            b_max=b, hf_max=h_f, hm_max=h_m, hfm_max=sep, rho_max=rho, xi_max=1
        ),
        dependence=dependence,
    )


def two_sex_logistic(
    beta: float,
    theta: float,
    h_f: float,
    h_m: float,
    p_female: float = 0.5,
    fertility_window: tuple | None = None,
) -> RateModel:
    """Two types (0 = female, 1 = male). Only females bear; fertility is
    logistic in the female count and optionally modulated by a smooth
    age window. Death rates are constant per type."""
    fert = smooth_window(*fertility_window) if fertility_window else None
    bearing = MultinomialLitter(size_pmf=((1, 1.0),), type_probs=(p_female, 1.0 - p_female))
    splitting = DeterministicOffspring((0, 0))

    def b(types, ages, phi):
        x = phi_component(phi, 0, ages)
        base = beta * np.maximum(0.0, 1.0 - x / theta)
        out = base * (np.asarray(types) == 0)
        if fert is not None:
            out = out * fert.fn(types, ages)
        return out * np.ones(np.broadcast(types, ages).shape)

    def b_dphi(types, ages, phi):
        x = phi_component(phi, 0, ages)
        slope = np.where(1.0 - x / theta > 0.0, -beta / theta, 0.0) * (np.asarray(types) == 0)
        if fert is not None:
            slope = slope * fert.fn(types, ages)
        return (slope * np.ones(np.broadcast(types, ages).shape))[..., None]

    def h(types, ages, phi):
        return np.where(np.asarray(types) == 0, h_f, h_m) * np.ones(np.broadcast(types, ages).shape)

    return RateModel(
        n_types=2,
        birth_rate=b,
        death_rate=h,
        bearing_law=bearing,
        splitting_law=splitting,
        bounds=Bounds(
            b_max=beta,
            h_max=max(h_f, h_m),
            m_max=1.0,
            gamma_max=1.0,
            xi_max=1,
        ),
        dependence=(type_indicator(0),),
        birth_rate_dphi=b_dphi,
        death_rate_dphi=_zero_dphi(1),
    )
