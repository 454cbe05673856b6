"""Test functions on the (type, age) state space.

A test function evaluates pointwise on vectors of types and ages and,
for the C1 families, exposes the derivative in the age variable. Pairing
against a population or cohort measure is an exact sum, no quadrature.

Two-age variants for the pair-formation model live at the bottom; they
obey the structural constraint that the value on a single depends only
on that single's own age slot.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .states import ABSENT

__all__ = [
    "TestFunction",
    "constant",
    "type_indicator",
    "age_power",
    "age_poly",
    "smooth_window",
    "product",
    "PairTestFunction",
    "pair_constant",
    "pair_type_indicator",
    "pair_from_singles",
    "headcount",
]


@dataclass(frozen=True)
class TestFunction:
    """Pointwise function f(i, v) with optional age derivative.

    ``fn`` and ``dfn`` must broadcast over numpy arrays of types and
    ages. ``dfn`` is None for families that are not C1.
    """

    name: str
    fn: Callable
    dfn: Callable | None = None

    def __call__(self, types, ages):
        return self.fn(np.asarray(types), np.asarray(ages))

    @property
    def differentiable(self) -> bool:
        return self.dfn is not None

    def deriv(self, types, ages):
        if self.dfn is None:
            raise ValueError(f"test function {self.name!r} is not differentiable")
        return self.dfn(np.asarray(types), np.asarray(ages))

    def at_birth(self, n_types: int) -> np.ndarray:
        """Values f(i, 0) for every type, as a length-n_types vector."""
        ts = np.arange(n_types)
        return np.asarray(self(ts, np.zeros(n_types)), dtype=float)


def constant(c: float = 1.0) -> TestFunction:
    return TestFunction(
        name=f"const[{c:g}]",
        fn=lambda i, v: np.broadcast_to(np.asarray(float(c)), np.broadcast(i, v).shape).copy(),
        dfn=lambda i, v: np.zeros(np.broadcast(i, v).shape),
    )


def type_indicator(type_index: int) -> TestFunction:
    return TestFunction(
        name=f"type[{type_index}]",
        fn=lambda i, v: (np.asarray(i) == type_index).astype(float) * np.ones_like(np.asarray(v, dtype=float)),
        dfn=lambda i, v: np.zeros(np.broadcast(i, v).shape),
    )


def age_power(p: int = 1) -> TestFunction:
    if p < 1:
        return constant(1.0)
    return TestFunction(
        name=f"age^{p}",
        fn=lambda i, v: np.asarray(v, dtype=float) ** p,
        dfn=lambda i, v: p * np.asarray(v, dtype=float) ** (p - 1),
    )


def age_poly(coeffs) -> TestFunction:
    """Polynomial in age, coeffs ordered from the constant term up."""
    c = np.asarray(coeffs, dtype=float)
    dc = c[1:] * np.arange(1, len(c))

    def fn(i, v):
        return np.polynomial.polynomial.polyval(np.asarray(v, dtype=float), c) * np.ones_like(
            np.asarray(i, dtype=float)
        )

    def dfn(i, v):
        if len(dc) == 0:
            return np.zeros(np.broadcast(i, v).shape)
        return np.polynomial.polynomial.polyval(np.asarray(v, dtype=float), dc) * np.ones_like(
            np.asarray(i, dtype=float)
        )

    return TestFunction(name=f"poly{tuple(c)}", fn=fn, dfn=dfn)


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def _smoothstep_deriv(x):
    inside = (x > 0.0) & (x < 1.0)
    x = np.clip(x, 0.0, 1.0)
    return np.where(inside, 6.0 * x * (1.0 - x), 0.0)


def smooth_window(lo: float, hi: float, ramp: float | None = None, type_index: int | None = None) -> TestFunction:
    """C1 bump: 0 outside [lo, hi], 1 on the plateau, cubic ramps of
    width ``ramp`` at both ends. Optionally restricted to one type."""
    if ramp is None:
        ramp = 0.25 * (hi - lo)
    if not (0 < 2 * ramp <= (hi - lo)):
        raise ValueError("ramp width must be positive and fit inside the window")

    def fn(i, v):
        v = np.asarray(v, dtype=float)
        up = _smoothstep((v - lo) / ramp)
        down = _smoothstep((hi - v) / ramp)
        out = up * down
        if type_index is not None:
            out = out * (np.asarray(i) == type_index)
        return out

    def dfn(i, v):
        v = np.asarray(v, dtype=float)
        up = _smoothstep((v - lo) / ramp)
        down = _smoothstep((hi - v) / ramp)
        dup = _smoothstep_deriv((v - lo) / ramp) / ramp
        ddown = -_smoothstep_deriv((hi - v) / ramp) / ramp
        out = dup * down + up * ddown
        if type_index is not None:
            out = out * (np.asarray(i) == type_index)
        return out

    tag = "" if type_index is None else f",type{type_index}"
    return TestFunction(name=f"window[{lo:g},{hi:g}{tag}]", fn=fn, dfn=dfn)


def product(f: TestFunction, g: TestFunction) -> TestFunction:
    dfn = None
    if f.differentiable and g.differentiable:
        dfn = lambda i, v: f.fn(i, v) * g.dfn(i, v) + f.dfn(i, v) * g.fn(i, v)
    return TestFunction(name=f"{f.name}*{g.name}", fn=lambda i, v: f.fn(i, v) * g.fn(i, v), dfn=dfn)


# ---------------------------------------------------------------------------
# Two-age test functions for the pair-formation model.
#
# Types are fixed: 0 = single female, 1 = single male, 2 = couple.
# f(0, v, .) depends only on v, f(1, ., w) only on w, and the couple
# component f(2, v, w) is a genuine two-variable function.

F, M, FM = 0, 1, 2


@dataclass(frozen=True)
class PairTestFunction:
    """f(type, v, w) with the single/couple structural constraint."""

    name: str
    f_single_f: Callable  # (v,) -> value
    f_single_m: Callable  # (w,) -> value
    f_couple: Callable  # (v, w) -> value
    d_single_f: Callable | None = None
    d_single_m: Callable | None = None
    d_couple_v: Callable | None = None
    d_couple_w: Callable | None = None

    def __call__(self, types, v, w):
        types = np.asarray(types)
        v = np.asarray(v, dtype=float)
        w = np.asarray(w, dtype=float)
        vf = np.where(np.isfinite(v), v, 0.0)
        wf = np.where(np.isfinite(w), w, 0.0)
        out = np.where(
            types == F,
            self.f_single_f(vf),
            np.where(types == M, self.f_single_m(wf), self.f_couple(vf, wf)),
        )
        return out

    @property
    def differentiable(self) -> bool:
        return None not in (self.d_single_f, self.d_single_m, self.d_couple_v, self.d_couple_w)

    def total_age_deriv(self, types, v, w):
        """d/dt f along aging (both finite slots advance at rate 1)."""
        types = np.asarray(types)
        v = np.asarray(v, dtype=float)
        w = np.asarray(w, dtype=float)
        vf = np.where(np.isfinite(v), v, 0.0)
        wf = np.where(np.isfinite(w), w, 0.0)
        return np.where(
            types == F,
            self.d_single_f(vf),
            np.where(
                types == M,
                self.d_single_m(wf),
                self.d_couple_v(vf, wf) + self.d_couple_w(vf, wf),
            ),
        )

    # Values used by birth, marriage and dissolution terms.
    def at_female_birth(self) -> float:
        return float(self.f_single_f(np.asarray(0.0)))

    def at_male_birth(self) -> float:
        return float(self.f_single_m(np.asarray(0.0)))

    def on_singles(self, v, w):
        """f(F, v, ABSENT) + f(M, ABSENT, w), the post-dissolution value."""
        return self.f_single_f(np.asarray(v, dtype=float)) + self.f_single_m(np.asarray(w, dtype=float))


def pair_constant(c: float = 1.0) -> PairTestFunction:
    z = lambda *a: np.broadcast_to(np.asarray(0.0), np.broadcast(*a).shape).copy()
    cf = lambda *a: np.broadcast_to(np.asarray(float(c)), np.broadcast(*a).shape).copy()
    return PairTestFunction(
        name=f"const[{c:g}]", f_single_f=cf, f_single_m=cf, f_couple=cf,
        d_single_f=z, d_single_m=z, d_couple_v=z, d_couple_w=z,
    )


def pair_type_indicator(type_index: int) -> PairTestFunction:
    def mk(val):
        return lambda *a: np.broadcast_to(np.asarray(float(val)), np.broadcast(*a).shape).copy()

    z = mk(0.0)
    return PairTestFunction(
        name=f"type[{'FMC'[type_index]}]",
        f_single_f=mk(1.0 if type_index == F else 0.0),
        f_single_m=mk(1.0 if type_index == M else 0.0),
        f_couple=mk(1.0 if type_index == FM else 0.0),
        d_single_f=z, d_single_m=z, d_couple_v=z, d_couple_w=z,
    )


def headcount() -> PairTestFunction:
    """The accounting functional: 1 on singles, 2 on couples."""
    one = lambda *a: np.broadcast_to(np.asarray(1.0), np.broadcast(*a).shape).copy()
    two = lambda *a: np.broadcast_to(np.asarray(2.0), np.broadcast(*a).shape).copy()
    z = lambda *a: np.broadcast_to(np.asarray(0.0), np.broadcast(*a).shape).copy()
    return PairTestFunction(
        name="headcount", f_single_f=one, f_single_m=one, f_couple=two,
        d_single_f=z, d_single_m=z, d_couple_v=z, d_couple_w=z,
    )


def pair_from_singles(f_f: TestFunction, f_m: TestFunction, name: str | None = None) -> PairTestFunction:
    """Additive couple value f(FM,v,w) = f_F(v) + f_M(w).

    For such functions the marriage and dissolution terms of the pair
    dynamics cancel identically.
    """
    ff = lambda v: f_f.fn(np.asarray(F), v)
    fm = lambda w: f_m.fn(np.asarray(M), w)
    dff = (lambda v: f_f.dfn(np.asarray(F), v)) if f_f.differentiable else None
    dfm = (lambda w: f_m.dfn(np.asarray(M), w)) if f_m.differentiable else None
    return PairTestFunction(
        name=name or f"{f_f.name}+{f_m.name}",
        f_single_f=ff,
        f_single_m=fm,
        f_couple=lambda v, w: ff(v) + fm(w),
        d_single_f=dff,
        d_single_m=dfm,
        d_couple_v=(lambda v, w: dff(v) * np.ones_like(np.asarray(w, dtype=float))) if dff else None,
        d_couple_w=(lambda v, w: dfm(w) * np.ones_like(np.asarray(v, dtype=float))) if dfm else None,
    )
