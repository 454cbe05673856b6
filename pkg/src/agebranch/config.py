"""Experiment configuration: TOML schema, registries, static validation.

A config file has four sections. ``[model]`` names a built-in family and
its parameters (plus optional ``[model.immigration]``); ``[initial]``
lists cohorts as densities per unit carrying capacity; ``[run]`` holds
the horizon, K sweep, replicate count, master seed and step sizes;
``[outputs]`` selects test functions, stages and the output directory.
"""

from __future__ import annotations

import dataclasses
import hashlib
import sys
from dataclasses import dataclass

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import builtin_models, functions
from .model import DiscreteArrivalKernel, Immigration, RateModel
from .monogamy import MonogamyModel, PairPopulation
from .limits import CohortMeasure
from .rng import stream
from .states import PopulationMeasure

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "load_config",
    "build_model",
    "build_initial_cohorts",
    "initial_population",
    "initial_pair_population",
    "initial_limit_measure",
    "parse_function",
    "validate_config",
]


class ConfigError(ValueError):
    """Schema or semantic error in a config file; message names the field."""


MODEL_FAMILIES = {
    "constant_rates": builtin_models.constant_rates,
    "pure_death": builtin_models.pure_death,
    "binary_splitting": builtin_models.binary_splitting,
    "logistic_birth_death": builtin_models.logistic_birth_death,
    "two_sex_logistic": builtin_models.two_sex_logistic,
    "serial_monogamy": builtin_models.serial_monogamy,
}

KNOWN_STAGES = (
    "simulate",
    "limit",
    "clt",
    "audit",
    "qv",
    "martingale",
    "lln",
    "crosscheck",
    "immigration",
)


@dataclass(frozen=True)
class ExperimentConfig:
    model: dict
    initial: dict
    run: dict
    outputs: dict
    raw: bytes
    path: str

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.raw).hexdigest()

    @property
    def K_list(self) -> list:
        return [float(k) for k in self.run["K"]]

    @property
    def stages(self) -> list:
        return list(self.outputs.get("stages", []))


def _require(table: dict, key: str, section: str):
    if key not in table:
        raise ConfigError(f"[{section}] is missing required key {key!r}")
    return table[key]


def load_config(path: str) -> ExperimentConfig:
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        doc = tomllib.loads(raw.decode("utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    for section in ("model", "initial", "run", "outputs"):
        if section not in doc:
            raise ConfigError(f"{path}: missing [{section}] section")
    model, initial, run, outputs = (doc[s] for s in ("model", "initial", "run", "outputs"))

    family = _require(model, "family", "model")
    if family not in MODEL_FAMILIES:
        raise ConfigError(f"[model] unknown family {family!r}; known: {sorted(MODEL_FAMILIES)}")
    _require(initial, "cohorts", "initial")

    T = _require(run, "T", "run")
    if not (isinstance(T, (int, float)) and T > 0):
        raise ConfigError("[run] T must be a positive number")
    Ks = _require(run, "K", "run")
    if not Ks or list(Ks) != sorted(Ks) or len(set(Ks)) != len(Ks):
        raise ConfigError("[run] K must be a strictly increasing list")
    if _require(run, "replicates", "run") < 1:
        raise ConfigError("[run] replicates must be >= 1")
    _require(run, "master_seed", "run")

    for st in outputs.get("stages", []):
        if st not in KNOWN_STAGES:
            raise ConfigError(f"[outputs] unknown stage {st!r}; known: {KNOWN_STAGES}")
    for spec in outputs.get("functions", []):
        parse_function(spec, pair=(family == "serial_monogamy"))

    return ExperimentConfig(model=model, initial=initial, run=run, outputs=outputs, raw=raw, path=path)


def build_model(cfg: ExperimentConfig):
    family = MODEL_FAMILIES[cfg.model["family"]]
    params = dict(cfg.model.get("params", {}))
    try:
        model = family(**params)
    except TypeError as exc:
        raise ConfigError(f"[model.params] {exc}") from exc

    imm = cfg.model.get("immigration")
    if imm is not None:
        if isinstance(model, MonogamyModel):
            raise ConfigError("[model.immigration] not supported for the pair-formation family")
        g = float(_require(imm, "rate", "model.immigration"))
        batch = tuple((int(n), float(p)) for n, p in _require(imm, "batch_sizes", "model.immigration"))
        kernel = DiscreteArrivalKernel(
            tuple((float(p), int(i), float(a)) for p, i, a in _require(imm, "kernel", "model.immigration"))
        )
        model = dataclasses.replace(
            model,
            immigration=Immigration(rate=lambda phi, t: g, batch_sizes=batch, kernel=kernel),
            bounds=dataclasses.replace(model.bounds, g_max=g),
        )
    return model


def build_initial_cohorts(cfg: ExperimentConfig) -> list:
    """Raw cohort rows from the config (densities per unit K)."""
    return [tuple(row) for row in cfg.initial["cohorts"]]


def initial_profile(cfg: ExperimentConfig) -> str:
    prof = cfg.initial.get("profile", "atoms")
    if prof not in ("atoms", "bump"):
        raise ConfigError(f"[initial] unknown profile {prof!r}")
    return prof


def bump_profile(ages, lo: float, hi: float) -> np.ndarray:
    """Smooth compactly supported density on (lo, hi), unit mass."""
    ages = np.asarray(ages, dtype=float)
    out = np.zeros_like(ages)
    m = (ages > lo) & (ages < hi)
    out[m] = np.exp(-1.0 / ((ages[m] - lo) * (hi - ages[m])))
    ref = np.linspace(lo, hi, 20001)
    mid = (ref > lo) & (ref < hi)
    vals = np.zeros_like(ref)
    vals[mid] = np.exp(-1.0 / ((ref[mid] - lo) * (hi - ref[mid])))
    return out / np.trapezoid(vals, ref)


def _bump_cell_masses(cfg: ExperimentConfig):
    """Per-row (type, cell centers, cell masses) for bump initial data."""
    width = float(cfg.initial.get("cell_width", 0.05))
    out = []
    for row in build_initial_cohorts(cfg):
        if len(row) != 4:
            raise ConfigError("[initial] bump rows must be [type, lo, hi, mass]")
        tp, lo, hi, mass = int(row[0]), float(row[1]), float(row[2]), float(row[3])
        if hi <= lo:
            raise ConfigError("[initial] bump needs hi > lo")
        edges = np.arange(lo, hi + width, width)
        centers, masses = [], []
        for a, b in zip(edges[:-1], edges[1:]):
            fine = np.linspace(a, min(b, hi), 201)
            centers.append(0.5 * (a + b))
            masses.append(float(np.trapezoid(mass * bump_profile(fine, lo, hi), fine)))
        out.append((tp, np.asarray(centers), np.asarray(masses)))
    return out


def initial_population(cfg: ExperimentConfig, K: float) -> PopulationMeasure:
    """Integer population at level K: floor(K * density) copies per cohort
    (bump profiles discretize into cells of [initial] cell_width first)."""
    rows = []
    if initial_profile(cfg) == "bump":
        for tp, centers, masses in _bump_cell_masses(cfg):
            for a, m in zip(centers, masses):
                rows.append((tp, float(a), int(round(K * m))))
    else:
        for row in build_initial_cohorts(cfg):
            if len(row) != 3:
                raise ConfigError("[initial] cohorts must be [type, age, density] rows")
            tp, age, dens = row
            rows.append((int(tp), float(age), int(np.floor(K * float(dens)))))
    return PopulationMeasure.from_cohorts([(t, a, c) for t, a, c in rows if c > 0])


def initial_pair_population(cfg: ExperimentConfig, K: float) -> PairPopulation:
    """Pair-formation analogue; atom rows are [type, v, w, density] with
    nan marking an absent slot; bump rows are singles-only."""
    rows = []
    if initial_profile(cfg) == "bump":
        from .functions import FM

        for tp, centers, masses in _bump_cell_masses(cfg):
            if tp == FM:
                raise ConfigError("[initial] bump profiles support single types only")
            for a, m in zip(centers, masses):
                count = int(round(K * m))
                if count > 0:
                    rows.append((tp, a if tp == 0 else None, a if tp == 1 else None, count))
    else:
        for row in build_initial_cohorts(cfg):
            if len(row) != 4:
                raise ConfigError("[initial] pair cohorts must be [type, v, w, density] rows")
            tp, v, w, dens = row
            v = None if (isinstance(v, float) and np.isnan(v)) else float(v)
            w = None if (isinstance(w, float) and np.isnan(w)) else float(w)
            count = int(np.floor(K * float(dens)))
            if count > 0:
                rows.append((int(tp), v, w, count))
    return PairPopulation.from_cohorts(rows)


def initial_limit_measure(cfg: ExperimentConfig) -> CohortMeasure:
    if initial_profile(cfg) == "bump":
        rows = []
        for tp, centers, masses in _bump_cell_masses(cfg):
            rows += [(tp, float(a), float(m)) for a, m in zip(centers, masses)]
        return CohortMeasure.from_cohorts(rows)
    return CohortMeasure.from_cohorts(
        [(int(t), float(a), float(d)) for t, a, d in build_initial_cohorts(cfg)]
    )


def initial_density_field(cfg: ExperimentConfig, n_types: int, da: float, age_box: float):
    """Branching-family density-grid initial state from bump rows."""
    from .limits import DensityField

    if initial_profile(cfg) != "bump":
        raise ConfigError("[initial] the density representation needs profile = 'bump'")
    n_nodes = int(round(age_box / da)) + 1
    ages = np.arange(n_nodes) * da
    dens = np.zeros((n_types, n_nodes))
    for row in build_initial_cohorts(cfg):
        tp, lo, hi, mass = int(row[0]), float(row[1]), float(row[2]), float(row[3])
        dens[tp] += mass * bump_profile(ages, lo, hi)
    return DensityField(dens, da)


def initial_two_sex_density(cfg: ExperimentConfig, da: float, age_box: float):
    """Pair-formation density initial state: singles-only bump rows."""
    from .functions import FM
    from .monogamy import TwoSexDensity

    if initial_profile(cfg) != "bump":
        raise ConfigError("[initial] the pair density representation needs profile = 'bump'")
    n_nodes = int(round(age_box / da)) + 1
    ages = np.arange(n_nodes) * da
    a_f = np.zeros(n_nodes)
    a_m = np.zeros(n_nodes)
    for row in build_initial_cohorts(cfg):
        tp, lo, hi, mass = int(row[0]), float(row[1]), float(row[2]), float(row[3])
        if tp == FM:
            raise ConfigError("[initial] bump profiles support single types only")
        (a_f if tp == 0 else a_m)[:] += mass * bump_profile(ages, lo, hi)
    return TwoSexDensity(a_f, a_m, np.zeros((n_nodes, n_nodes)), da)


def parse_function(spec: str, pair: bool = False):
    """Resolve a test-function spec string from the config registry.

    Single-age grammar: ``const``, ``const:C``, ``age``, ``age:P``,
    ``type:I``, ``window:LO:HI``. Pair grammar: ``headcount``, ``const``,
    ``females``, ``males``, ``couples``.
    """
    head, *args = str(spec).split(":")
    try:
        if pair:
            table = {
                "headcount": functions.headcount,
                "const": lambda: functions.pair_constant(float(args[0]) if args else 1.0),
                "females": lambda: functions.pair_type_indicator(functions.F),
                "males": lambda: functions.pair_type_indicator(functions.M),
                "couples": lambda: functions.pair_type_indicator(functions.FM),
            }
            if head not in table:
                raise ConfigError(f"unknown pair test function {spec!r}")
            return table[head]()
        if head == "const":
            return functions.constant(float(args[0]) if args else 1.0)
        if head == "age":
            return functions.age_power(int(args[0]) if args else 1)
        if head == "type":
            return functions.type_indicator(int(args[0]))
        if head == "window":
            return functions.smooth_window(float(args[0]), float(args[1]))
    except (IndexError, ValueError) as exc:
        raise ConfigError(f"bad test-function spec {spec!r}: {exc}") from exc
    raise ConfigError(f"unknown test function {spec!r}")


def output_functions(cfg: ExperimentConfig):
    pair = cfg.model["family"] == "serial_monogamy"
    specs = cfg.outputs.get("functions", ["const"] if not pair else ["headcount"])
    return tuple(parse_function(s, pair=pair) for s in specs)


# ---------------------------------------------------------------------------
# Validation report: static schema checks plus randomized probes of the
# uniform-bound and Lipschitz-in-phi conditions the theory assumes.


def _probe_entry(name, status, detail=""):
    return {"check": name, "status": status, "detail": detail}


def validate_config(cfg: ExperimentConfig, n_probe: int = 200, probe_seed: int = 0) -> list:
    """Return report entries; status is one of verified / probed /
    unverifiable / failed. A ``failed`` entry is a hard validation
    failure (e.g. a CLT stage on a model without rate derivatives)."""
    report = []
    try:
        model = build_model(cfg)
    except ConfigError as exc:
        return [_probe_entry("model-build", "failed", str(exc))]
    report.append(_probe_entry("model-build", "verified", cfg.model["family"]))

    rng = stream(probe_seed, 0xC0)
    if isinstance(model, MonogamyModel):
        report += _probe_monogamy_bounds(model, rng, n_probe)
    else:
        report += _probe_bounds(model, rng, n_probe)
        report += _probe_lipschitz(model, rng, n_probe)
        moments_ok = (
            model.bearing_law.mean().max(initial=0.0) <= model.bounds.m_max + 1e-12
            and model.splitting_law.mean().max(initial=0.0) <= model.bounds.m_max + 1e-12
        )
        report.append(
            _probe_entry(
                "offspring-moment-bounds",
                "verified" if moments_ok else "failed",
                f"m_max={model.bounds.m_max:g}",
            )
        )

    total0 = sum(float(row[-1]) for row in build_initial_cohorts(cfg))
    report.append(
        _probe_entry(
            "initial-mass-finite",
            "verified" if np.isfinite(total0) and total0 > 0 else "failed",
            f"density mass {total0:g}",
        )
    )

    needs_deriv = "clt" in cfg.stages and not isinstance(model, MonogamyModel)
    if needs_deriv:
        report.append(
            _probe_entry(
                "rate-derivatives",
                "verified" if model.has_derivatives else "failed",
                "required by the clt stage",
            )
        )
    return report


def _probe_state(model, rng, n):
    types = rng.integers(0, model.n_types, size=n)
    ages = rng.uniform(0.0, 10.0, size=n)
    phi = rng.uniform(0.0, 5.0, size=model.n_dependence)
    return types, ages, phi


def _probe_bounds(model: RateModel, rng, n_probe) -> list:
    out = []
    worst_b = worst_h = 0.0
    for _ in range(8):
        types, ages, phi = _probe_state(model, rng, n_probe)
        b = np.asarray(model.birth_rate(types, ages, phi), dtype=float)
        h = np.asarray(model.death_rate(types, ages, phi), dtype=float)
        if np.any(b < -1e-12) or np.any(h < -1e-12):
            out.append(_probe_entry("uniform-rate-bounds", "failed", "negative rate sampled"))
            return out
        worst_b = max(worst_b, float(b.max(initial=0.0)))
        worst_h = max(worst_h, float(h.max(initial=0.0)))
    ok = worst_b <= model.bounds.b_max + 1e-9 and worst_h <= model.bounds.h_max + 1e-9
    out.append(
        _probe_entry(
            "uniform-rate-bounds",
            "probed" if ok else "failed",
            f"max b={worst_b:g} (bound {model.bounds.b_max:g}), max h={worst_h:g} (bound {model.bounds.h_max:g})",
        )
    )
    return out


def _probe_lipschitz(model: RateModel, rng, n_probe) -> list:
    if model.n_dependence == 0:
        return [_probe_entry("lipschitz-in-dependence", "verified", "no dependence")]
    worst = 0.0
    for _ in range(8):
        types, ages, phi = _probe_state(model, rng, n_probe)
        eps = 1e-4
        for j in range(model.n_dependence):
            dphi = phi.copy()
            dphi[j] += eps
            db = np.asarray(model.birth_rate(types, ages, dphi), dtype=float) - np.asarray(
                model.birth_rate(types, ages, phi), dtype=float
            )
            dh = np.asarray(model.death_rate(types, ages, dphi), dtype=float) - np.asarray(
                model.death_rate(types, ages, phi), dtype=float
            )
            worst = max(worst, float(np.abs(db).max(initial=0.0) / eps), float(np.abs(dh).max(initial=0.0) / eps))
    ok = np.isfinite(worst)
    return [
        _probe_entry(
            "lipschitz-in-dependence",
            "probed" if ok else "failed",
            f"max finite-difference slope {worst:g}",
        )
    ]


def _probe_monogamy_bounds(model: MonogamyModel, rng, n_probe) -> list:
    bb = model.bounds
    worst = {}
    for _ in range(8):
        v = rng.uniform(0.0, 10.0, size=n_probe)
        w = rng.uniform(0.0, 10.0, size=n_probe)
        phi = rng.uniform(0.0, 5.0, size=model.n_dependence)
        for name, fn, hi in (
            ("bearing", model.bearing_rate, bb.b_max),
            ("death_f", model.death_rate_f, bb.hf_max),
            ("death_m", model.death_rate_m, bb.hm_max),
            ("separation", model.separation_rate, bb.hfm_max),
            ("marriage", model.marriage_rate, bb.rho_max),
        ):
            vals = np.asarray(fn(v, w, phi), dtype=float)
            if np.any(vals < -1e-12):
                return [_probe_entry("uniform-rate-bounds", "failed", f"negative {name} rate")]
            prev = worst.get(name, (0.0, hi))
            worst[name] = (max(prev[0], float(vals.max(initial=0.0))), hi)
    bad = [n for n, (mx, hi) in worst.items() if mx > hi + 1e-9]
    return [
        _probe_entry(
            "uniform-rate-bounds",
            "failed" if bad else "probed",
            "; ".join(f"{n} max {mx:g} (bound {hi:g})" for n, (mx, hi) in worst.items()),
        )
    ]
