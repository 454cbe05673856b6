"""Individual states and the population counting measure.

An individual is a (type, age) point; the population at time t is the
finite counting measure placing unit mass at each living individual's
state. Couples in the pair-formation extension carry two age slots; the
unused slot of a single is ABSENT (numerically ``inf``, so that rate
functions written for two-age arguments evaluate without special cases).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["ABSENT", "StateS", "PopulationMeasure"]

# Unused age slot of a single individual. Kept as +inf so two-age rate
# functions and test functions are total without branching.
ABSENT = np.inf


@dataclass(frozen=True)
class StateS:
    """Type and age point of one individual.

    ``age_secondary`` is ABSENT for every type except the couple type of
    the pair-formation model, where the two slots hold the female and
    male ages.
    """

    type_index: int
    age_primary: float
    age_secondary: float = ABSENT

    def __post_init__(self):
        if self.type_index < 0:
            raise ValueError(f"type_index must be >= 0, got {self.type_index}")
        if not (self.age_primary >= 0.0 or self.age_primary == ABSENT):
            raise ValueError(f"age must be nonnegative, got {self.age_primary}")


@dataclass
class PopulationMeasure:
    """Finite multiset of living individuals with a clock.

    Stored as parallel arrays for vectorised rate evaluation. Ages are
    derived from birth times: ``age = clock - birth_time``, so advancing
    the clock ages everyone at rate 1 for free. An absent age slot is
    encoded by birth time ``-inf`` (age ``+inf``).
    """

    ids: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    types: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    birth_times: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=float))
    birth_times_secondary: np.ndarray | None = None
    clock: float = 0.0

    @classmethod
    def from_cohorts(cls, cohorts, clock: float = 0.0, id_start: int = 0):
        """Build a population from (type_index, age, count) triples."""
        types, bts, n = [], [], 0
        for type_index, age, count in cohorts:
            types.extend([type_index] * int(count))
            bts.extend([clock - age] * int(count))
            n += int(count)
        return cls(
            ids=np.arange(id_start, id_start + n, dtype=np.int64),
            types=np.asarray(types, dtype=np.int64),
            birth_times=np.asarray(bts, dtype=float),
            clock=clock,
        )

    @property
    def size(self) -> int:
        return len(self.ids)

    @property
    def ages(self) -> np.ndarray:
        return self.clock - self.birth_times

    @property
    def ages_secondary(self) -> np.ndarray:
        if self.birth_times_secondary is None:
            return np.full(self.size, ABSENT)
        return self.clock - self.birth_times_secondary

    def states(self) -> list[StateS]:
        sec = self.ages_secondary
        return [
            StateS(int(i), float(a), float(w))
            for i, a, w in zip(self.types, self.ages, sec)
        ]

    def copy(self) -> "PopulationMeasure":
        return PopulationMeasure(
            ids=self.ids.copy(),
            types=self.types.copy(),
            birth_times=self.birth_times.copy(),
            birth_times_secondary=None
            if self.birth_times_secondary is None
            else self.birth_times_secondary.copy(),
            clock=self.clock,
        )

    def check_invariants(self, initial_age_bound: float | None = None) -> None:
        """Raise if ids collide or any age is negative / beyond the bound."""
        if len(np.unique(self.ids)) != self.size:
            raise ValueError("duplicate individual ids")
        ages = self.ages
        finite = np.isfinite(ages)
        if np.any(ages[finite] < -1e-12):
            raise ValueError("negative age in population")
        if initial_age_bound is not None:
            limit = self.clock + initial_age_bound + 1e-9
            if np.any(ages[finite] > limit):
                raise ValueError("age exceeds clock + initial age bound")
