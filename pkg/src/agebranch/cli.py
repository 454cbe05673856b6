"""Experiment runner: ``agebranch run | validate | report``.

``run`` executes the stages requested in a config file and writes CSV
time series, JSON verdicts and a manifest into the output directory.
All randomness derives from counter-based streams keyed by
(master_seed, K, replicate), and replicate results are aggregated in a
fixed order, so outputs are byte-identical for any worker count.

Exit codes: 0 all checks pass, 1 a check failed, 2 usage or config
error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import hashlib
import json
import os
import sys

import numpy as np

import dataclasses

from .config import (
    ConfigError,
    ExperimentConfig,
    build_initial_cohorts,
    build_model,
    initial_density_field,
    initial_limit_measure,
    initial_pair_population,
    initial_population,
    initial_two_sex_density,
    load_config,
    output_functions,
    validate_config,
)
from .fluctuations import clt_report, estimate_Z, grid_test_vector, limit_time_grid, lyapunov_moments
from .limits import mild_form_values, solve_density, solve_limit
from .model import functionals
from .monogamy import (
    MonogamyModel,
    accounting_series,
    monogamy_qv,
    monogamy_residual,
    simulate_monogamy,
    solve_limit_monogamy,
)
from .rng import stream
from .simulate import empirical_qv, martingale_residual, simulate

TOOL_VERSION = "0.1.0"

EXIT_PASS = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_RUNTIME = 3


def _fmt(x) -> str:
    return repr(float(x))


def _time_grid(cfg: ExperimentConfig) -> np.ndarray:
    pts = int(cfg.run.get("time_points", 21))
    return np.linspace(0.0, float(cfg.run["T"]), pts)


def _write_csv(path: str, header: list, columns: list):
    lines = [",".join(header)]
    for row in zip(*columns):
        lines.append(",".join(_fmt(v) for v in row))
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _write_json(path: str, payload):
    with open(path, "w", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Replicate jobs. Workers rebuild the model from the config path because
# rate callables are closures and do not pickle.


def _replicate_job(config_path: str, K: float, r: int, want: str):
    cfg = load_config(config_path)
    model = build_model(cfg)
    fs = output_functions(cfg)
    T = float(cfg.run["T"])
    grid = _time_grid(cfg)
    seed = int(stream(int(cfg.run["master_seed"]), K, r).integers(0, 2**63 - 1))
    substep = T / int(cfg.run.get("qv_substeps", 200))
    if isinstance(model, MonogamyModel):
        init = initial_pair_population(cfg, K)
        traj = simulate_monogamy(model, init, K=K, T=T, seed=seed, time_grid=grid, test_functions=fs)
        if want == "audit":
            accounting_series(traj)
            return {"events": traj.n_events, "violations": 0}
        if want == "qv":
            br, comp = monogamy_qv(model, traj, fs, substep=substep)
            return {
                "bracket": [float(br[f.name][-1]) for f in fs],
                "compensator": [float(comp[f.name][-1]) for f in fs],
            }
        if want == "martingale":
            res = monogamy_residual(model, traj, fs, substep=substep)
            return [float(res[f.name][-1]) for f in fs]
        return np.stack([traj.series[f.name] for f in fs])
    init = initial_population(cfg, K)
    traj = simulate(model, init, K=K, T=T, seed=seed, time_grid=grid, test_functions=fs)
    if want == "qv":
        bracket, predictable = empirical_qv(model, traj, fs, substep=substep)
        return {
            "bracket": [float(bracket.values[f.name][-1]) for f in fs],
            "compensator": [float(predictable.values[f.name][-1]) for f in fs],
        }
    if want == "martingale":
        res = martingale_residual(model, traj, fs, substep=substep)
        return [float(res.values[f.name][-1]) for f in fs]
    return np.stack([traj.series[f.name] for f in fs])


def _map_replicates(cfg: ExperimentConfig, K_list, want: str, workers: int) -> dict:
    """Run (K, replicate) jobs and return results keyed (K, r), with the
    dict built in sorted key order regardless of completion order."""
    reps = int(cfg.run["replicates"])
    jobs = [(K, r) for K in K_list for r in range(reps)]
    results = {}
    if workers <= 1:
        for K, r in jobs:
            results[(K, r)] = _replicate_job(cfg.path, K, r, want)
        return results
    with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
        futures = {(K, r): pool.submit(_replicate_job, cfg.path, K, r, want) for K, r in jobs}
        return {key: futures[key].result() for key in sorted(futures)}


# ---------------------------------------------------------------------------
# Stages.


def _stage_limit(cfg: ExperimentConfig, model, outdir: str) -> list:
    if isinstance(model, MonogamyModel):
        raise ConfigError("the limit stage expects a single-age branching family")
    fs = output_functions(cfg)
    grid = _time_grid(cfg)
    limit = solve_limit(
        model, initial_limit_measure(cfg), T=float(cfg.run["T"]),
        dt=float(cfg.run.get("dt", 1e-3)), time_grid=grid,
    )
    cols = [limit.times] + [limit.series(f) for f in fs]
    path = os.path.join(outdir, "limit.csv")
    _write_csv(path, ["time"] + [f.name for f in fs], cols)
    return [path]


def _stage_simulate(cfg: ExperimentConfig, model, outdir: str, workers: int) -> list:
    fs = output_functions(cfg)
    grid = _time_grid(cfg)
    reps = int(cfg.run["replicates"])
    results = _map_replicates(cfg, cfg.K_list, "series", workers)
    paths = []
    for K in cfg.K_list:
        stacked = np.stack([results[(K, r)] for r in range(reps)]) / K
        header = ["time"]
        cols = [grid]
        for j, f in enumerate(fs):
            header += [f"{f.name}:mean", f"{f.name}:sd"]
            cols += [stacked[:, j, :].mean(axis=0), stacked[:, j, :].std(axis=0, ddof=1)]
        path = os.path.join(outdir, f"simulate_K{K:g}.csv")
        _write_csv(path, header, cols)
        paths.append(path)
    return paths


def _stage_audit(cfg: ExperimentConfig, model, outdir: str, workers: int) -> list:
    if not isinstance(model, MonogamyModel):
        raise ConfigError("the audit stage expects the pair-formation family")
    results = _map_replicates(cfg, cfg.K_list, "audit", workers)
    events = sum(res["events"] for res in results.values())
    violations = sum(res["violations"] for res in results.values())
    min_events = int(cfg.outputs.get("audit_min_events", 0))
    payload = {
        "check": "per-event head-count audit",
        "events": events,
        "violations": violations,
        "min_events": min_events,
        "passed": violations == 0 and events >= min_events,
        "master_seed": int(cfg.run["master_seed"]),
    }
    path = os.path.join(outdir, "audit.json")
    _write_json(path, payload)
    return [path]


def _stage_qv(cfg: ExperimentConfig, model, outdir: str, workers: int) -> list:
    """Bootstrap comparison of the summed squared jumps with the
    quadrature of the predictable quadratic variation at the largest K."""
    fs = output_functions(cfg)
    K = cfg.K_list[-1]
    reps = int(cfg.run["replicates"])
    results = _map_replicates(cfg, [K], "qv", workers)
    br = np.array([results[(K, r)]["bracket"] for r in range(reps)])
    comp = np.array([results[(K, r)]["compensator"] for r in range(reps)])
    reference = None
    if cfg.outputs.get("qv_closed_form", False):
        # linear branching oracle: with constant b, h and mean litter m,
        # E[N_u] = N0 exp((b m - h) u) and the expected QV of the count
        # martingale is int (b + h) E[N_u] du
        if cfg.model["family"] != "constant_rates" or isinstance(model, MonogamyModel):
            raise ConfigError("[outputs] qv_closed_form needs the constant_rates family")
        b = float(cfg.model["params"]["b"])
        h = float(cfg.model["params"]["h"])
        m = float(model.bearing_law.mean().sum())
        n0 = initial_population(cfg, K).size
        r = b * m - h
        T = float(cfg.run["T"])
        growth = T if abs(r) < 1e-14 else (np.exp(r * T) - 1.0) / r
        reference = (b + h) * n0 * growth
    ref_tol = float(cfg.outputs.get("qv_reference_tol", 0.05))

    rng = stream(int(cfg.run["master_seed"]), 0xB007)
    verdicts = []
    for j, f in enumerate(fs):
        idx = rng.integers(0, reps, size=(999, reps))
        ci_br = np.percentile(br[idx, j].mean(axis=1), [2.5, 97.5])
        ci_comp = np.percentile(comp[idx, j].mean(axis=1), [2.5, 97.5])
        ok = bool(ci_br[0] <= ci_comp[1] and ci_comp[0] <= ci_br[1])
        diff = br[:, j] - comp[:, j]
        se = float(diff.std(ddof=1) / np.sqrt(reps))
        within_3se = bool(abs(diff.mean()) <= 3.0 * se)
        entry = {
            "function": f.name,
            "K": K,
            "bracket_mean": float(br[:, j].mean()),
            "compensator_mean": float(comp[:, j].mean()),
            "bracket_ci": [float(ci_br[0]), float(ci_br[1])],
            "compensator_ci": [float(ci_comp[0]), float(ci_comp[1])],
            "paired_diff_mean": float(diff.mean()),
            "paired_diff_se": se,
            "passed": ok or within_3se,
        }
        if reference is not None and f.name == "const[1]":
            ref_ok = bool(
                abs(br[:, j].mean() / reference - 1.0) <= ref_tol
                and abs(comp[:, j].mean() / reference - 1.0) <= ref_tol
            )
            entry["reference"] = float(reference)
            entry["reference_ok"] = bool(ref_ok)
            entry["passed"] = entry["passed"] and ref_ok
        verdicts.append(entry)
    payload = {
        "check": "quadratic-variation match",
        "master_seed": int(cfg.run["master_seed"]),
        "verdicts": verdicts,
        "passed": all(v["passed"] for v in verdicts),
    }
    path = os.path.join(outdir, "qv.json")
    _write_json(path, payload)
    return [path]


def _stage_martingale(cfg: ExperimentConfig, model, outdir: str, workers: int) -> list:
    """Replicate means of the pathwise martingale residual at T must sit
    within 3 standard errors of zero, at the largest K."""
    fs = output_functions(cfg)
    K = cfg.K_list[-1]
    reps = int(cfg.run["replicates"])
    results = _map_replicates(cfg, [K], "martingale", workers)
    vals = np.array([results[(K, r)] for r in range(reps)])
    verdicts = []
    for j, f in enumerate(fs):
        x = vals[:, j]
        se = float(x.std(ddof=1) / np.sqrt(reps))
        verdicts.append(
            {
                "function": f.name,
                "K": K,
                "residual_mean": float(x.mean()),
                "residual_se": se,
                "passed": bool(abs(x.mean()) <= 3.0 * se),
            }
        )
    payload = {
        "check": "martingale residual centering",
        "master_seed": int(cfg.run["master_seed"]),
        "replicates": reps,
        "verdicts": verdicts,
        "passed": all(v["passed"] for v in verdicts),
    }
    path = os.path.join(outdir, "martingale.json")
    _write_json(path, payload)
    return [path]


def _stage_lln(cfg: ExperimentConfig, model, outdir: str, workers: int) -> list:
    """Scaled replicate means vs the deterministic limit at checkpoints;
    the sup error must shrink between the smallest and largest K."""
    fs = output_functions(cfg)
    T = float(cfg.run["T"])
    grid = _time_grid(cfg)
    reps = int(cfg.run["replicates"])
    ratio_min = float(cfg.outputs.get("lln_ratio_min", 3.0))

    symmetry_gap = None
    if isinstance(model, MonogamyModel):
        da = float(cfg.run.get("da", 0.01))
        age_box = float(cfg.run["age_box"])
        limit = solve_limit_monogamy(
            model, initial_two_sex_density(cfg, da, age_box), T=T, dt=da, time_grid=grid
        )
        if cfg.outputs.get("check_symmetry", False):
            symmetry_gap = max(
                float(np.abs(st.a_f - st.a_m).max(initial=0.0)) for st in limit.states
            )
    else:
        limit = solve_limit(
            model, initial_limit_measure(cfg), T=T, dt=float(cfg.run.get("dt", 1e-3)), time_grid=grid
        )
    limit_series = {f.name: limit.series(f) for f in fs}

    results = _map_replicates(cfg, cfg.K_list, "series", workers)
    verdicts = []
    for j, f in enumerate(fs):
        errs = []
        for K in cfg.K_list:
            mean = np.stack([results[(K, r)][j] for r in range(reps)]).mean(axis=0) / K
            errs.append(float(np.abs(mean - limit_series[f.name]).max()))
        ratio = errs[0] / max(errs[-1], 1e-300)
        verdicts.append(
            {
                "function": f.name,
                "K": cfg.K_list,
                "sup_errors": errs,
                "ratio": ratio,
                "passed": bool(errs[-1] < errs[0] and ratio >= ratio_min),
            }
        )
    payload = {
        "check": "law-of-large-numbers convergence",
        "master_seed": int(cfg.run["master_seed"]),
        "replicates": reps,
        "ratio_min": ratio_min,
        "verdicts": verdicts,
        "passed": all(v["passed"] for v in verdicts),
    }
    if symmetry_gap is not None:
        payload["symmetry_gap"] = symmetry_gap
        payload["symmetry_ok"] = symmetry_gap <= 1e-10
        payload["passed"] = payload["passed"] and payload["symmetry_ok"]
    path = os.path.join(outdir, "lln.json")
    _write_json(path, payload)
    return [path]


def _freeze(model, phi0):
    """Hold the dependence vector fixed; the flow becomes linear."""
    return dataclasses.replace(
        model,
        birth_rate=lambda t, a, phi, _m=model: _m.birth_rate(t, a, phi0),
        death_rate=lambda t, a, phi, _m=model: _m.death_rate(t, a, phi0),
        dependence=(),
        birth_rate_dphi=None,
        death_rate_dphi=None,
    )


def _stage_crosscheck(cfg: ExperimentConfig, model, outdir: str, workers: int) -> list:
    """Cohort solver vs density solver on the same initial law, plus the
    frozen-environment renewal-equation reference."""
    if isinstance(model, MonogamyModel):
        raise ConfigError("the crosscheck stage expects a single-age branching family")
    fs = output_functions(cfg)
    T = float(cfg.run["T"])
    grid = _time_grid(cfg)
    da = float(cfg.run.get("da", 1e-3))
    age_box = float(cfg.run["age_box"])
    cross_tol = float(cfg.outputs.get("cross_tol", 1e-3))
    mild_tol = float(cfg.outputs.get("mild_tol", 1e-6))

    init_atoms = initial_limit_measure(cfg)
    cohort = solve_limit(model, init_atoms, T=T, dt=float(cfg.run.get("dt", 1e-3)), time_grid=grid)
    density = solve_density(
        model, initial_density_field(cfg, model.n_types, da, age_box), T=T, time_grid=grid
    )
    verdicts = []
    for f in fs:
        a = cohort.series(f)
        b = density.series(f)
        scale = max(float(np.abs(a).max()), 1e-300)
        gap = float(np.abs(a - b).max()) / scale
        verdicts.append({"function": f.name, "relative_gap": gap, "passed": bool(gap <= cross_tol)})

    phi0 = functionals(model, init_atoms)
    frozen = _freeze(model, phi0)
    mild = mild_form_values(
        frozen, init_atoms, T, [], fs, n_steps=int(cfg.run.get("mild_steps", 4000))
    )
    frozen_cohort = solve_limit(
        frozen, init_atoms, T=T, dt=float(cfg.run.get("dt", 1e-3)), time_grid=[0.0, T]
    )
    mild_verdicts = []
    for f in fs:
        ref = mild[f.name]
        got = float(frozen_cohort.series(f)[-1])
        gap = abs(got - ref) / max(abs(ref), 1e-300)
        mild_verdicts.append(
            {"function": f.name, "reference": ref, "solver": got, "relative_gap": gap,
             "passed": bool(gap <= mild_tol)}
        )
    payload = {
        "check": "limit-solver cross-validation",
        "cross_tol": cross_tol,
        "mild_tol": mild_tol,
        "cross": verdicts,
        "mild_form": mild_verdicts,
        "passed": all(v["passed"] for v in verdicts + mild_verdicts),
    }
    path = os.path.join(outdir, "crosscheck.json")
    _write_json(path, payload)
    return [path]


def _stage_immigration(cfg: ExperimentConfig, model, outdir: str, workers: int) -> list:
    """The immigration stream is O(1) while the population is O(K), so
    scaled functionals should approach the immigration-free limit at
    rate 1/K: quadrupling K shrinks the gap by a factor in a band."""
    if model.immigration is None:
        raise ConfigError("the immigration stage needs a [model.immigration] block")
    if len(cfg.K_list) != 2 or abs(cfg.K_list[1] / cfg.K_list[0] - 4.0) > 1e-9:
        raise ConfigError("[run] the immigration stage needs K = [K0, 4 * K0]")
    fs = output_functions(cfg)
    T = float(cfg.run["T"])
    grid = _time_grid(cfg)
    reps = int(cfg.run["replicates"])
    lo = float(cfg.outputs.get("shrink_lo", 2.5))
    hi = float(cfg.outputs.get("shrink_hi", 6.0))

    bare = dataclasses.replace(
        model, immigration=None, bounds=dataclasses.replace(model.bounds, g_max=0.0)
    )
    limit = solve_limit(
        bare, initial_limit_measure(cfg), T=T, dt=float(cfg.run.get("dt", 1e-3)), time_grid=grid
    )
    limit_series = {f.name: limit.series(f) for f in fs}

    results = _map_replicates(cfg, cfg.K_list, "series", workers)
    verdicts = []
    for j, f in enumerate(fs):
        gaps = []
        for K in cfg.K_list:
            mean = np.stack([results[(K, r)][j] for r in range(reps)]).mean(axis=0) / K
            gaps.append(float(np.abs(mean - limit_series[f.name]).max()))
        shrink = gaps[0] / max(gaps[1], 1e-300)
        verdicts.append(
            {
                "function": f.name,
                "K": cfg.K_list,
                "gaps": gaps,
                "shrink_factor": shrink,
                "passed": bool(lo <= shrink <= hi),
            }
        )
    payload = {
        "check": "immigration O(1/K) invariance",
        "band": [lo, hi],
        "replicates": reps,
        "master_seed": int(cfg.run["master_seed"]),
        "verdicts": verdicts,
        "passed": all(v["passed"] for v in verdicts),
    }
    path = os.path.join(outdir, "immigration.json")
    _write_json(path, payload)
    return [path]


def _stage_clt(cfg: ExperimentConfig, model, outdir: str, workers: int) -> list:
    if isinstance(model, MonogamyModel):
        raise ConfigError("the clt stage expects a single-age branching family")
    fs = output_functions(cfg)
    T = float(cfg.run["T"])
    da = float(cfg.run.get("da", 0.05))
    cohorts = [(int(t), float(a), float(d)) for t, a, d in build_initial_cohorts(cfg)]
    age_box = float(cfg.run.get("age_box", max(a for _, a, _ in cohorts) + T + 1.0))
    n_cells = int(round(age_box / da))

    lim_fine = solve_limit(
        model, initial_limit_measure(cfg), T=T, dt=da, time_grid=limit_time_grid(T, da)
    )
    field0 = lyapunov_moments(
        model, lim_fine, da=da, dt=da, T=T, n_cells=n_cells,
        nu0=np.zeros(model.n_types * n_cells),
        sigma0=np.zeros((model.n_types * n_cells,) * 2),
        snapshot_times=[T],
    )[-1]
    predicted = {f.name: field0.variance_of(grid_test_vector(field0, f)) for f in fs}

    grid = _time_grid(cfg)
    lim = solve_limit(
        model, initial_limit_measure(cfg), T=T, dt=float(cfg.run.get("dt", 1e-3)), time_grid=grid
    )
    samples = estimate_Z(
        model, cohorts, [int(K) for K in cfg.K_list], int(cfg.run["replicates"]),
        fs, T, lim, int(cfg.run["master_seed"]), time_grid=grid,
    )
    tol = float(cfg.outputs.get("variance_tol", 0.15))
    flat = float(cfg.outputs.get("flatness_max", 1.5))
    verdicts = clt_report(samples, predicted, variance_tol=tol, flatness_max=flat)
    payload = {
        "check": "central-limit fluctuation report",
        "master_seed": int(cfg.run["master_seed"]),
        "variance_tol": tol,
        "flatness_max": flat,
        "verdicts": [v.as_dict() for v in verdicts],
        "passed": all(v.passed for v in verdicts),
    }
    path = os.path.join(outdir, "clt.json")
    _write_json(path, payload)
    return [path]


_STAGES = {
    "limit": lambda cfg, model, outdir, workers: _stage_limit(cfg, model, outdir),
    "simulate": _stage_simulate,
    "audit": _stage_audit,
    "qv": _stage_qv,
    "clt": _stage_clt,
    "martingale": _stage_martingale,
    "lln": _stage_lln,
    "crosscheck": _stage_crosscheck,
    "immigration": _stage_immigration,
}


# ---------------------------------------------------------------------------
# Verbs.


def _resolve_outdir(cfg: ExperimentConfig, override: str | None) -> str:
    if override:
        out = override
    else:
        root = os.environ.get("AGEBRANCH_OUTPUT_ROOT", ".")
        out = os.path.join(root, cfg.outputs.get("dir", "out"))
    os.makedirs(out, exist_ok=True)
    return out


def _sha256(path: str) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    hard = [e for e in validate_config(cfg) if e["status"] == "failed"]
    if hard:
        for e in hard:
            print(f"validation failure: {e['check']}: {e['detail']}", file=sys.stderr)
        return EXIT_USAGE
    outdir = _resolve_outdir(cfg, args.output_dir)
    written = []
    failed_check = False
    try:
        model = build_model(cfg)
        for stage in cfg.stages:
            paths = _STAGES[stage](cfg, model, outdir, args.workers)
            written += paths
            for p in paths:
                if p.endswith(".json"):
                    with open(p) as fh:
                        if not json.load(fh).get("passed", True):
                            failed_check = True
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - map any stage failure to exit 3
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

    manifest = {
        "config_hash": cfg.config_hash,
        "master_seed": int(cfg.run["master_seed"]),
        "seed_scheme": "philox-stream(master_seed, K, replicate)",
        "tool_version": TOOL_VERSION,
        "outputs": {os.path.basename(p): _sha256(p) for p in sorted(written)},
    }
    _write_json(os.path.join(outdir, "manifest.json"), manifest)
    print(f"wrote {len(written) + 1} files to {outdir}")
    return EXIT_CHECK_FAILED if failed_check else EXIT_PASS


def cmd_validate(args) -> int:
    try:
        cfg = load_config(args.config)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    report = validate_config(cfg)
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_CHECK_FAILED if any(e["status"] == "failed" for e in report) else EXIT_PASS


def cmd_report(args) -> int:
    names = (
        "martingale.json",
        "qv.json",
        "lln.json",
        "crosscheck.json",
        "clt.json",
        "immigration.json",
        "audit.json",
    )
    found = [os.path.join(args.output_dir, n) for n in names if os.path.exists(os.path.join(args.output_dir, n))]
    if not found:
        print(f"no verdict files in {args.output_dir}", file=sys.stderr)
        return EXIT_USAGE
    all_ok = True
    for path in found:
        with open(path) as fh:
            doc = json.load(fh)
        ok = bool(doc.get("passed", False))
        all_ok &= ok
        print(f"{doc.get('check', os.path.basename(path))}: {'PASS' if ok else 'FAIL'}")
    return EXIT_PASS if all_ok else EXIT_CHECK_FAILED


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="agebranch", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)

    p_run = sub.add_parser("run", help="execute the stages of a config")
    p_run.add_argument("config")
    p_run.add_argument("--workers", type=int, default=1)
    p_run.add_argument("--output-dir", default=None)
    p_run.set_defaults(fn=cmd_run)

    p_val = sub.add_parser("validate", help="static and probe checks of a config")
    p_val.add_argument("config")
    p_val.set_defaults(fn=cmd_validate)

    p_rep = sub.add_parser("report", help="re-render verdicts from stored outputs")
    p_rep.add_argument("output_dir")
    p_rep.set_defaults(fn=cmd_report)

    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else 0
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
