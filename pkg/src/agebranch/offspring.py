"""Sampleable joint offspring laws over per-type counts.

Each law carries a full joint distribution; first moments and second
cross-moments are computed from that distribution, never entered
separately, so the (mean, second-moment) pair can't be inconsistent.
All laws respect a hard cap on the total litter size.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import poisson

__all__ = [
    "OffspringLaw",
    "DeterministicOffspring",
    "TruncatedPoissonOffspring",
    "MultinomialLitter",
]


class OffspringLaw:
    """Joint law of per-type offspring counts at one event.

    Subclasses define ``sample``, ``mean`` (length-k vector m^i) and
    ``second_moment`` (k x k matrix of E[xi^i xi^j]), plus ``max_total``,
    the almost-sure bound on the total litter size.
    """

    n_types: int
    max_total: int

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def mean(self) -> np.ndarray:
        raise NotImplementedError

    def second_moment(self) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class DeterministicOffspring(OffspringLaw):
    """Always the same vector of counts. counts=(0,...,0) is 'no litter'."""

    counts: tuple

    @property
    def n_types(self) -> int:
        return len(self.counts)

    @property
    def max_total(self) -> int:
        return int(sum(self.counts))

    def sample(self, rng):
        return np.asarray(self.counts, dtype=np.int64)

    def mean(self):
        return np.asarray(self.counts, dtype=float)

    def second_moment(self):
        c = np.asarray(self.counts, dtype=float)
        return np.outer(c, c)


@dataclass(frozen=True)
class TruncatedPoissonOffspring(OffspringLaw):
    """Independent per-type counts, each Poisson conditioned on <= cap."""

    rates: tuple
    cap: int = 6

    @property
    def n_types(self) -> int:
        return len(self.rates)

    @property
    def max_total(self) -> int:
        return self.cap * len(self.rates)

    def _pmfs(self):
        ks = np.arange(self.cap + 1)
        out = []
        for lam in self.rates:
            p = poisson.pmf(ks, lam)
            out.append(p / p.sum())
        return ks, out

    def sample(self, rng):
        ks, pmfs = self._pmfs()
        return np.array([rng.choice(ks, p=p) for p in pmfs], dtype=np.int64)

    def mean(self):
        ks, pmfs = self._pmfs()
        return np.array([float(np.dot(ks, p)) for p in pmfs])

    def second_moment(self):
        ks, pmfs = self._pmfs()
        m = self.mean()
        diag2 = np.array([float(np.dot(ks**2, p)) for p in pmfs])
        out = np.outer(m, m)
        np.fill_diagonal(out, diag2)
        return out


@dataclass(frozen=True)
class MultinomialLitter(OffspringLaw):
    """Random litter size split multinomially over types.

    ``size_pmf`` maps litter size -> probability; ``type_probs`` is the
    per-child type distribution.
    """

    size_pmf: tuple  # ((size, prob), ...)
    type_probs: tuple

    def __post_init__(self):
        total = sum(p for _, p in self.size_pmf)
        if abs(total - 1.0) > 1e-12:
            raise ValueError("litter size pmf must sum to 1")
        if abs(sum(self.type_probs) - 1.0) > 1e-12:
            raise ValueError("type probabilities must sum to 1")

    @property
    def n_types(self) -> int:
        return len(self.type_probs)

    @property
    def max_total(self) -> int:
        return int(max(n for n, _ in self.size_pmf))

    def sample(self, rng):
        sizes = np.array([n for n, _ in self.size_pmf])
        probs = np.array([p for _, p in self.size_pmf])
        n = int(rng.choice(sizes, p=probs))
        if n == 0:
            return np.zeros(self.n_types, dtype=np.int64)
        return rng.multinomial(n, np.asarray(self.type_probs))

    def _size_moments(self):
        en = sum(n * p for n, p in self.size_pmf)
        en2 = sum(n * n * p for n, p in self.size_pmf)
        return en, en2

    def mean(self):
        en, _ = self._size_moments()
        return en * np.asarray(self.type_probs, dtype=float)

    def second_moment(self):
        # E[xi_i xi_j] = E[N(N-1)] p_i p_j + delta_ij E[N] p_i
        en, en2 = self._size_moments()
        p = np.asarray(self.type_probs, dtype=float)
        out = (en2 - en) * np.outer(p, p)
        out[np.diag_indices_from(out)] += en * p
        return out
