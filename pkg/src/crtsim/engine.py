"""Study orchestration.

Expands a scenario grid from a JSON config, builds (or reloads) one
constrained randomization pool per villages-per-arm value, calibrates
the outcome model per scenario cell, runs replicates with
schedule-invariant substreams, and aggregates one-sided rejection
rates per estimator with Monte Carlo error. Completed scenarios are
cached on disk so an interrupted study resumes without recomputation.
"""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .census import (Census, DEFAULT_PROFILES, generate_synthetic_census,
                     load_census, load_profiles, write_census)
from .dgm import (CalibratedIntercepts, CoefficientSet, DEFAULT_CRITICAL_Z,
                  Scenario, calibrate_intercepts, coefficient_set,
                  simulate_followup)
from .errors import ConfigError, SingularDesignError
from .estimators import (METHODS, AnalysisDataset, fit_beta_regression,
                         fit_quasibinomial, naive_wald)
from .randomization import (ConstrainedPool, DEFAULT_SMD_THRESHOLD, build_pool,
                            load_pool, sample_from_pool, write_pool)
from .rngtools import substream

RESULTS_HEADER = ["scenario_id", "cer", "delta", "n_per_arm", "coef_set", "icc_v",
                  "method", "n_reps", "n_reject", "rate", "mcse", "ci_low",
                  "ci_high", "fail_rate"]

SCALE_PROFILES = {
    "desk": {"n_attempts": 50_000, "n_reps_null": 2_000, "n_reps_alt": 500},
    "paper": {"n_attempts": 1_000_000, "n_reps_null": 10_000, "n_reps_alt": 1_000},
}


class MonteCarloInterval(NamedTuple):
    se: float
    ci_low: float
    ci_high: float


def mcse(rate: float, n_reps: int) -> MonteCarloInterval:
    """Monte Carlo standard error of a rejection rate with its 95% CI."""
    if n_reps < 1:
        raise ConfigError(f"n_reps must be >= 1, got {n_reps}")
    if not 0.0 <= rate <= 1.0:
        raise ConfigError(f"rate must lie in [0, 1], got {rate}")
    se = math.sqrt(rate * (1.0 - rate) / n_reps)
    return MonteCarloInterval(
        se=se,
        ci_low=max(rate - 1.96 * se, 0.0),
        ci_high=min(rate + 1.96 * se, 1.0),
    )


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StudyConfig:
    census_file: str | None
    profiles_file: str | None
    census_seed: int
    n_attempts: int
    threshold: float
    cer: tuple[float, ...]
    delta: tuple[float, ...]
    n_per_arm: tuple[int, ...]
    coef_sets: tuple[CoefficientSet, ...]
    icc_v: tuple[float, ...]
    n_reps_null: int
    n_reps_alt: int
    critical_z: float
    master_seed: int
    output_dir: str | None
    scale: str


def _expect(mapping: dict, key: str, path: str):
    if key not in mapping:
        raise ConfigError(f"{path}.{key}: missing required field")
    return mapping[key]


def _as_number(value, path: str, kind=float):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{path}: expected a number, got {value!r}")
    if kind is int:
        if int(value) != value:
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return int(value)
    return float(value)


def _as_number_list(value, path: str, kind=float) -> list:
    if not isinstance(value, list) or not value:
        raise ConfigError(f"{path}: expected a nonempty array")
    return [_as_number(v, f"{path}[{i}]", kind) for i, v in enumerate(value)]


def _parse_coef_entry(value, path: str) -> CoefficientSet:
    if isinstance(value, bool):
        raise ConfigError(f"{path}: expected a set index or object, got {value!r}")
    if isinstance(value, int):
        return coefficient_set(value)
    if isinstance(value, dict):
        bp = _as_number(_expect(value, "beta_pop", path), f"{path}.beta_pop")
        bd = _as_number(_expect(value, "beta_dist", path), f"{path}.beta_dist")
        return CoefficientSet(beta_pop=bp, beta_dist=bd, set_index=0)
    raise ConfigError(f"{path}: expected a set index or object, got {value!r}")


def load_study_config(source: str | Path | dict, *, desk_scale: bool = False,
                      output_dir: str | None = None) -> StudyConfig:
    """Parse and validate a study config, naming the offending field on error."""
    if isinstance(source, (str, Path)):
        path = Path(source)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    else:
        raw = source
    if not isinstance(raw, dict):
        raise ConfigError("config: expected a JSON object")

    scale = raw.get("scale", "paper")
    if desk_scale:
        scale = "desk"
    if scale not in SCALE_PROFILES:
        raise ConfigError(f"config.scale: expected 'desk' or 'paper', got {scale!r}")
    profile = SCALE_PROFILES[scale]

    census = raw.get("census", {"profiles": "default", "seed": 0})
    if not isinstance(census, dict):
        raise ConfigError("config.census: expected an object")
    census_file = census.get("file")
    profiles_file = census.get("profiles")
    if census_file is not None and profiles_file is not None:
        raise ConfigError("config.census: give either 'file' or 'profiles', not both")
    if census_file is None and profiles_file is None:
        raise ConfigError("config.census: needs 'file' or 'profiles'")
    census_seed = _as_number(census.get("seed", 0), "config.census.seed", int)

    pool = raw.get("pool", {})
    if not isinstance(pool, dict):
        raise ConfigError("config.pool: expected an object")
    n_attempts = _as_number(pool.get("n_attempts", profile["n_attempts"]),
                            "config.pool.n_attempts", int)
    threshold = _as_number(pool.get("threshold", DEFAULT_SMD_THRESHOLD),
                           "config.pool.threshold")
    if n_attempts < 1:
        raise ConfigError(f"config.pool.n_attempts: must be >= 1, got {n_attempts}")
    if threshold <= 0:
        raise ConfigError(f"config.pool.threshold: must be > 0, got {threshold}")

    grid = _expect(raw, "grid", "config")
    if not isinstance(grid, dict):
        raise ConfigError("config.grid: expected an object")
    cer = _as_number_list(_expect(grid, "cer", "config.grid"), "config.grid.cer")
    delta = _as_number_list(_expect(grid, "delta", "config.grid"), "config.grid.delta")
    n_per_arm = _as_number_list(_expect(grid, "n_per_arm", "config.grid"),
                                "config.grid.n_per_arm", int)
    icc_v = _as_number_list(_expect(grid, "icc_v", "config.grid"), "config.grid.icc_v")
    coef_raw = _expect(grid, "coef_sets", "config.grid")
    if not isinstance(coef_raw, list) or not coef_raw:
        raise ConfigError("config.grid.coef_sets: expected a nonempty array")
    coef_sets = tuple(_parse_coef_entry(v, f"config.grid.coef_sets[{i}]")
                      for i, v in enumerate(coef_raw))

    n_reps_null = _as_number(raw.get("n_reps_null", profile["n_reps_null"]),
                             "config.n_reps_null", int)
    n_reps_alt = _as_number(raw.get("n_reps_alt", profile["n_reps_alt"]),
                            "config.n_reps_alt", int)
    if n_reps_null < 1:
        raise ConfigError(f"config.n_reps_null: must be >= 1, got {n_reps_null}")
    if n_reps_alt < 1:
        raise ConfigError(f"config.n_reps_alt: must be >= 1, got {n_reps_alt}")
    critical_z = _as_number(raw.get("critical_z", DEFAULT_CRITICAL_Z),
                            "config.critical_z")
    if critical_z <= 0:
        raise ConfigError(f"config.critical_z: must be > 0, got {critical_z}")
    master_seed = _as_number(raw.get("master_seed", 0), "config.master_seed", int)
    if master_seed < 0:
        raise ConfigError(f"config.master_seed: must be >= 0, got {master_seed}")

    out = output_dir if output_dir is not None else raw.get("output_dir")
    if out is not None and not isinstance(out, str):
        raise ConfigError("config.output_dir: expected a string path")

    return StudyConfig(
        census_file=census_file, profiles_file=profiles_file,
        census_seed=census_seed, n_attempts=n_attempts, threshold=threshold,
        cer=tuple(cer), delta=tuple(delta), n_per_arm=tuple(n_per_arm),
        coef_sets=coef_sets, icc_v=tuple(icc_v),
        n_reps_null=n_reps_null, n_reps_alt=n_reps_alt,
        critical_z=critical_z, master_seed=master_seed,
        output_dir=out, scale=scale,
    )


# ---------------------------------------------------------------------------
# Grid expansion
# ---------------------------------------------------------------------------

def _coef_key(coef: CoefficientSet) -> str:
    if coef.set_index:
        return str(coef.set_index)
    return f"bp{coef.beta_pop!r}bd{coef.beta_dist!r}"


def scenario_id(scenario: Scenario) -> str:
    return (f"cer{scenario.cer!r}_d{scenario.delta!r}_n{scenario.n_per_arm}"
            f"_coef{_coef_key(scenario.coef)}_icc{scenario.icc_v!r}")


def expand_grid(config: StudyConfig) -> list[Scenario]:
    """Cross the config grids into a deduplicated, lexicographic scenario list.

    Null cells (delta = 0) get n_reps_null replicates; the rest get
    n_reps_alt.
    """
    cells: dict[tuple, Scenario] = {}
    for cer in config.cer:
        for delta in config.delta:
            for n in config.n_per_arm:
                for coef in config.coef_sets:
                    for icc in config.icc_v:
                        key = (cer, delta, n, _coef_key(coef), icc)
                        if key in cells:
                            continue
                        n_reps = config.n_reps_null if delta == 0.0 else config.n_reps_alt
                        try:
                            cells[key] = Scenario(
                                cer=cer, delta=delta, n_per_arm=n, coef=coef,
                                icc_v=icc, n_reps=n_reps,
                                critical_z=config.critical_z,
                                seed=config.master_seed,
                            )
                        except ConfigError as exc:
                            raise ConfigError(f"config.grid cell {key}: {exc}") from None
    return [cells[k] for k in sorted(cells)]


# ---------------------------------------------------------------------------
# Scenario execution
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MethodSummary:
    method: str
    n_reps: int
    n_reject: int
    n_fail: int

    @property
    def rate(self) -> float:
        return self.n_reject / self.n_reps

    @property
    def fail_rate(self) -> float:
        return self.n_fail / self.n_reps

    @property
    def interval(self) -> MonteCarloInterval:
        return mcse(self.rate, self.n_reps)


@dataclass(frozen=True)
class ScenarioSummary:
    scenario: Scenario
    scenario_id: str
    methods: dict[str, MethodSummary] = field(compare=False)

    def as_dict(self) -> dict:
        out = {
            "scenario_id": self.scenario_id,
            "cer": self.scenario.cer,
            "delta": self.scenario.delta,
            "n_per_arm": self.scenario.n_per_arm,
            "coef_set": self.scenario.coef.set_index,
            "beta_pop": self.scenario.coef.beta_pop,
            "beta_dist": self.scenario.coef.beta_dist,
            "icc_v": self.scenario.icc_v,
            "critical_z": self.scenario.critical_z,
            "seed": self.scenario.seed,
            "methods": {},
        }
        for name in METHODS:
            s = self.methods[name]
            iv = s.interval
            out["methods"][name] = {
                "n_reps": s.n_reps, "n_reject": s.n_reject, "rate": s.rate,
                "mcse": iv.se, "ci_low": iv.ci_low, "ci_high": iv.ci_high,
                "n_fail": s.n_fail, "fail_rate": s.fail_rate,
            }
        return out


def _run_replicate(census: Census, pool: ConstrainedPool,
                   calib: CalibratedIntercepts, scenario: Scenario,
                   sid: str, rep: int) -> tuple[np.ndarray, np.ndarray]:
    """One replicate: returns per-method (reject, fail) indicator vectors."""
    draw = sample_from_pool(pool, substream(scenario.seed, sid, rep, "draw"))
    villages = simulate_followup(census, draw, calib, scenario,
                                 substream(scenario.seed, sid, rep, "dgm"))
    data = AnalysisDataset.from_villages(villages)
    rejects = np.zeros(len(METHODS), dtype=np.int64)
    fails = np.zeros(len(METHODS), dtype=np.int64)
    for k, name in enumerate(METHODS):
        try:
            if name == "naive":
                result = naive_wald(data, scenario.critical_z)
            elif name == "quasibinomial":
                result = fit_quasibinomial(data, scenario.critical_z)
            else:
                result = fit_beta_regression(data, scenario.critical_z)
        except SingularDesignError:
            fails[k] += 1
            continue
        rejects[k] += int(result.reject)
        fails[k] += int(not result.converged)
    return rejects, fails


def _run_rep_range(census: Census, pool: ConstrainedPool,
                   calib: CalibratedIntercepts, scenario: Scenario,
                   sid: str, rep_lo: int, rep_hi: int) -> tuple[np.ndarray, np.ndarray]:
    rejects = np.zeros(len(METHODS), dtype=np.int64)
    fails = np.zeros(len(METHODS), dtype=np.int64)
    for rep in range(rep_lo, rep_hi):
        r, f = _run_replicate(census, pool, calib, scenario, sid, rep)
        rejects += r
        fails += f
    return rejects, fails


_WORKER_STATE: dict = {}


def _worker_init(census, pool, calib, scenario, sid):
    _WORKER_STATE["args"] = (census, pool, calib, scenario, sid)


def _worker_range(bounds: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    census, pool, calib, scenario, sid = _WORKER_STATE["args"]
    return _run_rep_range(census, pool, calib, scenario, sid, *bounds)


def run_scenario(scenario: Scenario, census: Census, pool: ConstrainedPool,
                 calib: CalibratedIntercepts, workers: int = 1) -> ScenarioSummary:
    """Run every replicate of one scenario and aggregate the decisions.

    Replicates use substreams keyed by (seed, scenario id, replicate,
    purpose), so the aggregate is identical for any worker count or
    schedule. Nonconvergence never aborts: it counts as a non-rejection
    and feeds the failure-rate column.
    """
    sid = scenario_id(scenario)
    n = scenario.n_reps
    if workers <= 1 or n < 2:
        rejects, fails = _run_rep_range(census, pool, calib, scenario, sid, 0, n)
    else:
        chunk = max(1, math.ceil(n / (workers * 4)))
        bounds = [(lo, min(lo + chunk, n)) for lo in range(0, n, chunk)]
        rejects = np.zeros(len(METHODS), dtype=np.int64)
        fails = np.zeros(len(METHODS), dtype=np.int64)
        with ProcessPoolExecutor(
            max_workers=workers, initializer=_worker_init,
            initargs=(census, pool, calib, scenario, sid),
        ) as pool_exec:
            for r, f in pool_exec.map(_worker_range, bounds):
                rejects += r
                fails += f
    methods = {
        name: MethodSummary(method=name, n_reps=n,
                            n_reject=int(rejects[k]), n_fail=int(fails[k]))
        for k, name in enumerate(METHODS)
    }
    return ScenarioSummary(scenario=scenario, scenario_id=sid, methods=methods)


# ---------------------------------------------------------------------------
# Study driver with on-disk resume
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StudyResult:
    summaries: list[ScenarioSummary]
    results_csv: Path
    summary_json: Path
    census: Census
    pools: dict[int, ConstrainedPool]


def _load_cached_summary(path: Path, scenario: Scenario,
                         sid: str) -> ScenarioSummary | None:
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError):
        return None
    probe = raw.get("scenario", {})
    current = {
        "cer": scenario.cer, "delta": scenario.delta,
        "n_per_arm": scenario.n_per_arm,
        "beta_pop": scenario.coef.beta_pop, "beta_dist": scenario.coef.beta_dist,
        "icc_v": scenario.icc_v, "n_reps": scenario.n_reps,
        "critical_z": scenario.critical_z, "seed": scenario.seed,
    }
    if probe != current:
        return None
    methods = {}
    try:
        for name in METHODS:
            m = raw["methods"][name]
            methods[name] = MethodSummary(
                method=name, n_reps=int(m["n_reps"]),
                n_reject=int(m["n_reject"]), n_fail=int(m["n_fail"]),
            )
    except (KeyError, TypeError, ValueError):
        return None
    return ScenarioSummary(scenario=scenario, scenario_id=sid, methods=methods)


def _write_cached_summary(path: Path, summary: ScenarioSummary) -> None:
    s = summary.scenario
    payload = {
        "scenario": {
            "cer": s.cer, "delta": s.delta, "n_per_arm": s.n_per_arm,
            "beta_pop": s.coef.beta_pop, "beta_dist": s.coef.beta_dist,
            "icc_v": s.icc_v, "n_reps": s.n_reps,
            "critical_z": s.critical_z, "seed": s.seed,
        },
        "methods": {
            name: {"n_reps": m.n_reps, "n_reject": m.n_reject, "n_fail": m.n_fail}
            for name, m in summary.methods.items()
        },
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def _study_census(config: StudyConfig) -> Census:
    if config.census_file is not None:
        return load_census(config.census_file, require_expected_areas=True)
    if config.profiles_file == "default":
        profiles = DEFAULT_PROFILES
    else:
        profiles = load_profiles(config.profiles_file)
    return generate_synthetic_census(profiles, seed=config.census_seed)


def run_study(config: StudyConfig, workers: int = 1,
              log=None) -> StudyResult:
    """Execute the full grid, reusing any artifacts already on disk.

    The output directory receives census.csv, pools/pool_n{N}.csv, a
    per-scenario cache under scenarios/, results.csv, and summary.json.
    Rerunning with the same config reuses caches and reproduces every
    output byte for byte.
    """
    if config.output_dir is None:
        raise ConfigError("config.output_dir: required (or pass --out)")
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "pools").mkdir(exist_ok=True)
    (out_dir / "scenarios").mkdir(exist_ok=True)

    def say(msg: str) -> None:
        if log is not None:
            log(msg)

    census = _study_census(config)
    write_census(census, out_dir / "census.csv")

    scenarios = expand_grid(config)
    pools: dict[int, ConstrainedPool] = {}
    for n in sorted({s.n_per_arm for s in scenarios}):
        pool_path = out_dir / "pools" / f"pool_n{n}.csv"
        if pool_path.exists():
            pools[n] = load_pool(pool_path, census, threshold=config.threshold)
            say(f"pool n={n}: reloaded {len(pools[n].draws)} draws")
        else:
            pools[n] = build_pool(census, n, config.n_attempts,
                                  threshold=config.threshold,
                                  seed=config.master_seed)
            write_pool(pools[n], pool_path)
            say(f"pool n={n}: accepted {len(pools[n].draws)} of {config.n_attempts}")

    calib_cache: dict[tuple, CalibratedIntercepts] = {}
    summaries: list[ScenarioSummary] = []
    for scenario in scenarios:
        sid = scenario_id(scenario)
        cache_path = out_dir / "scenarios" / f"{sid}.json"
        cached = _load_cached_summary(cache_path, scenario, sid) if cache_path.exists() else None
        if cached is not None:
            summaries.append(cached)
            say(f"{sid}: cached")
            continue
        calib_key = (scenario.cer, scenario.delta, scenario.coef, scenario.icc_v)
        if calib_key not in calib_cache:
            calib_cache[calib_key] = calibrate_intercepts(census, scenario)
        summary = run_scenario(scenario, census, pools[scenario.n_per_arm],
                               calib_cache[calib_key], workers=workers)
        _write_cached_summary(cache_path, summary)
        summaries.append(summary)
        say(f"{sid}: done ({scenario.n_reps} reps)")

    results_csv = out_dir / "results.csv"
    write_results(summaries, results_csv)
    summary_json = out_dir / "summary.json"
    payload = {
        "critical_z": config.critical_z,
        "master_seed": config.master_seed,
        "scale": config.scale,
        "threshold": config.threshold,
        "n_attempts": config.n_attempts,
        "scenarios": [s.as_dict() for s in summaries],
    }
    summary_json.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                            encoding="utf-8")
    return StudyResult(summaries=summaries, results_csv=results_csv,
                       summary_json=summary_json, census=census, pools=pools)


# ---------------------------------------------------------------------------
# Results persistence and the closed-form comparison
# ---------------------------------------------------------------------------

def write_results(summaries: Iterable[ScenarioSummary], path: str | Path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RESULTS_HEADER)
        for summary in summaries:
            s = summary.scenario
            for name in METHODS:
                m = summary.methods[name]
                iv = m.interval
                writer.writerow([
                    summary.scenario_id, repr(s.cer), repr(s.delta), s.n_per_arm,
                    s.coef.set_index, repr(s.icc_v), name, m.n_reps, m.n_reject,
                    repr(m.rate), repr(iv.se), repr(iv.ci_low), repr(iv.ci_high),
                    repr(m.fail_rate),
                ])


def load_results(path: str | Path) -> list[dict]:
    """Read a results CSV back into typed row dicts."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"results file not found: {path}")
    rows = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != RESULTS_HEADER:
            raise ConfigError(f"{path}: bad header {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(RESULTS_HEADER):
                raise ConfigError(f"{path}: row {lineno} has {len(row)} fields")
            try:
                rows.append({
                    "scenario_id": row[0], "cer": float(row[1]),
                    "delta": float(row[2]), "n_per_arm": int(row[3]),
                    "coef_set": int(row[4]), "icc_v": float(row[5]),
                    "method": row[6], "n_reps": int(row[7]),
                    "n_reject": int(row[8]), "rate": float(row[9]),
                    "mcse": float(row[10]), "ci_low": float(row[11]),
                    "ci_high": float(row[12]), "fail_rate": float(row[13]),
                })
            except ValueError as exc:
                raise ConfigError(f"{path}: row {lineno}: {exc}") from None
    return rows


COMPARE_HEADER = (["cer", "delta", "n_per_arm", "coef_set", "icc_v", "formula_power"]
                  + [f"{m}_{c}" for m in METHODS for c in ("rate", "ci_low", "ci_high")])


def compare_report(sim_rows: list[dict],
                   formula_power: dict[tuple[int, float, float], float],
                   ) -> tuple[list[dict], list[tuple]]:
    """Join simulated rejection rates with closed-form power.

    `formula_power` maps (n_per_arm, cer, delta) to the closed-form
    value. Returns (table rows, unmatched keys); unmatched keys are
    reported, never fatal.
    """
    grouped: dict[tuple, dict] = {}
    for row in sim_rows:
        key = (row["cer"], row["delta"], row["n_per_arm"],
               row["coef_set"], row["icc_v"])
        cell = grouped.setdefault(key, {})
        cell[row["method"]] = row
    unmatched = []
    out = []
    seen_formula_keys = set()
    for key in sorted(grouped):
        cer, delta, n, coef_set, icc_v = key
        fkey = (n, cer, delta)
        seen_formula_keys.add(fkey)
        fp = formula_power.get(fkey)
        if fp is None:
            unmatched.append(fkey)
        # formula column carries the published 3-decimal display values
        row = {"cer": cer, "delta": delta, "n_per_arm": n,
               "coef_set": coef_set, "icc_v": icc_v,
               "formula_power": None if fp is None else round(fp, 3)}
        for m in METHODS:
            cell = grouped[key].get(m)
            row[f"{m}_rate"] = cell["rate"] if cell else None
            row[f"{m}_ci_low"] = cell["ci_low"] if cell else None
            row[f"{m}_ci_high"] = cell["ci_high"] if cell else None
        out.append(row)
    for fkey in sorted(set(formula_power) - seen_formula_keys):
        unmatched.append(fkey)
    return out, unmatched


def write_compare(rows: list[dict], path: str | Path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(COMPARE_HEADER)
        for row in rows:
            out = []
            for col in COMPARE_HEADER:
                v = row.get(col)
                if v is None:
                    out.append("")
                elif isinstance(v, float):
                    out.append(repr(v))
                else:
                    out.append(v)
            writer.writerow(out)
