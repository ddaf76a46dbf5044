"""Baseline census data model, ingestion, synthesis, and summaries.

A census is a set of villages nested in health areas, each village
carrying its population, distance to the nearest vaccinating health
centre, and baseline vaccination counts among children aged 12-24
months. Villages with fewer than 5 eligible children are kept in the
container but excluded from the analysis view used by every downstream
computation.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from functools import cached_property, lru_cache
from pathlib import Path

import numpy as np
from scipy import optimize, stats

from .errors import CensusSchemaError, GenerationError, InputError
from .rngtools import substream

ANALYSIS_MIN_CHILDREN = 5
EXPECTED_AREAS = 12
CENSUS_HEADER = ["village_id", "health_area", "population", "distance_km", "n_children", "n_mcv1"]

_PROFILE_FIELDS = [
    "n_villages",
    "distance_mean", "distance_sd",
    "population_mean", "population_sd",
    "children_mean", "children_sd",
    "mcv1_rate_mean", "mcv1_rate_sd",
]

# Bounded rejection sampling: give up after this many tries per village.
_MAX_REJECTIONS = 10_000
_MIN_DISTANCE_KM = 0.1
_RATE_CLIP = (0.01, 0.99)


@dataclass(frozen=True)
class Village:
    """One village row: identifiers, size covariates, and baseline counts."""

    village_id: str
    health_area_id: str
    population: int
    distance_km: float
    n_children: int
    n_mcv1: int

    def __post_init__(self):
        if self.n_children < 0 or self.n_mcv1 < 0 or self.population < 0:
            raise ValueError(f"village {self.village_id}: counts must be non-negative")
        if self.n_mcv1 > self.n_children:
            raise ValueError(
                f"village {self.village_id}: n_mcv1 ({self.n_mcv1}) exceeds "
                f"n_children ({self.n_children})"
            )
        if self.distance_km < 0:
            raise ValueError(f"village {self.village_id}: distance_km must be >= 0")
        if self.population < self.n_children:
            raise ValueError(
                f"village {self.village_id}: population ({self.population}) below "
                f"n_children ({self.n_children})"
            )

    @property
    def mcv1_rate(self) -> float:
        return self.n_mcv1 / self.n_children if self.n_children else float("nan")


@dataclass(frozen=True)
class HealthAreaProfile:
    """Per-area moments used to synthesize villages."""

    name: str
    n_villages: int
    distance_mean: float
    distance_sd: float
    population_mean: float
    population_sd: float
    children_mean: float
    children_sd: float
    mcv1_rate_mean: float
    mcv1_rate_sd: float

    def __post_init__(self):
        if self.n_villages < 1:
            raise ValueError(f"profile {self.name}: n_villages must be >= 1")
        for field in ("distance_sd", "population_sd", "children_sd", "mcv1_rate_sd"):
            if getattr(self, field) < 0:
                raise ValueError(f"profile {self.name}: {field} must be >= 0")
        if not 0.0 <= self.mcv1_rate_mean <= 1.0:
            raise ValueError(f"profile {self.name}: mcv1_rate_mean must lie in [0, 1]")


@dataclass(frozen=True)
class Census:
    """Immutable village collection grouped into health areas."""

    villages: tuple[Village, ...]

    def __post_init__(self):
        if not self.villages:
            raise ValueError("census must contain at least one village")
        seen = set()
        for v in self.villages:
            if v.village_id in seen:
                raise ValueError(f"duplicate village_id {v.village_id!r}")
            seen.add(v.village_id)

    @cached_property
    def health_areas(self) -> tuple[str, ...]:
        """Distinct health area ids in lexicographic order."""
        return tuple(sorted({v.health_area_id for v in self.villages}))

    @cached_property
    def analysis_villages(self) -> tuple[Village, ...]:
        """Villages eligible for analysis (>= 5 children at baseline)."""
        return tuple(v for v in self.villages if v.n_children >= ANALYSIS_MIN_CHILDREN)

    @cached_property
    def analysis_by_area(self) -> dict[str, tuple[Village, ...]]:
        out: dict[str, list[Village]] = {a: [] for a in self.health_areas}
        for v in self.analysis_villages:
            out[v.health_area_id].append(v)
        return {a: tuple(vs) for a, vs in out.items()}

    @cached_property
    def arrays(self) -> "CensusArrays":
        return CensusArrays.from_villages(self.analysis_villages)

    def require_expected_areas(self) -> None:
        """Raise unless the census has exactly the 12 trial health areas."""
        n = len(self.health_areas)
        if n != EXPECTED_AREAS:
            raise CensusSchemaError(
                f"census has {n} health areas, expected {EXPECTED_AREAS}: "
                f"{', '.join(self.health_areas)}"
            )


@dataclass(frozen=True)
class CensusArrays:
    """Column-oriented view of the analysis villages for fast numerics."""

    village_ids: tuple[str, ...]
    area_ids: tuple[str, ...]
    population: np.ndarray
    distance: np.ndarray
    n_children: np.ndarray
    n_mcv1: np.ndarray

    @classmethod
    def from_villages(cls, villages: tuple[Village, ...]) -> "CensusArrays":
        return cls(
            village_ids=tuple(v.village_id for v in villages),
            area_ids=tuple(v.health_area_id for v in villages),
            population=np.array([v.population for v in villages], dtype=float),
            distance=np.array([v.distance_km for v in villages], dtype=float),
            n_children=np.array([v.n_children for v in villages], dtype=np.int64),
            n_mcv1=np.array([v.n_mcv1 for v in villages], dtype=np.int64),
        )

    @cached_property
    def baseline_rate(self) -> np.ndarray:
        return self.n_mcv1 / self.n_children

    @cached_property
    def baseline_logit(self) -> np.ndarray:
        return empirical_logit_array(self.n_mcv1, self.n_children)

    @cached_property
    def index_of(self) -> dict[str, int]:
        return {vid: i for i, vid in enumerate(self.village_ids)}


def empirical_logit(y: int, m: int) -> float:
    """Continuity-corrected logit log((y+0.5)/(m-y+0.5)), finite at 0 and m."""
    if m < 1:
        raise ValueError(f"empirical_logit needs m >= 1, got m={m}")
    if not 0 <= y <= m:
        raise ValueError(f"empirical_logit needs 0 <= y <= m, got y={y}, m={m}")
    return math.log((y + 0.5) / (m - y + 0.5))


def empirical_logit_array(y: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Vectorized :func:`empirical_logit`."""
    y = np.asarray(y, dtype=float)
    m = np.asarray(m, dtype=float)
    if np.any(m < 1):
        raise ValueError("empirical_logit needs m >= 1 everywhere")
    return np.log((y + 0.5) / (m - y + 0.5))


# ---------------------------------------------------------------------------
# CSV ingestion / output
# ---------------------------------------------------------------------------

def load_census(path: str | Path, *, require_expected_areas: bool = False) -> Census:
    """Load and validate a census CSV.

    The header must be exactly ``village_id,health_area,population,
    distance_km,n_children,n_mcv1``. Any row violating a village
    invariant aborts the load with an error naming the row. Area-count
    enforcement is opt-in so partial censuses can be inspected; the
    randomization layer always insists on the full 12 areas.
    """
    path = Path(path)
    if not path.exists():
        raise CensusSchemaError(f"census file not found: {path}")
    villages = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CensusSchemaError(f"{path}: empty file") from None
        if header != CENSUS_HEADER:
            raise CensusSchemaError(
                f"{path}: bad header {header!r}, expected {CENSUS_HEADER!r}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CENSUS_HEADER):
                raise CensusSchemaError(
                    f"{path}: row {lineno} has {len(row)} fields, expected {len(CENSUS_HEADER)}"
                )
            vid, area, pop_s, dist_s, m_s, y_s = row
            try:
                village = Village(
                    village_id=vid,
                    health_area_id=area,
                    population=int(pop_s),
                    distance_km=float(dist_s),
                    n_children=int(m_s),
                    n_mcv1=int(y_s),
                )
            except ValueError as exc:
                raise CensusSchemaError(f"{path}: row {lineno}: {exc}") from None
            villages.append(village)
    if not villages:
        raise CensusSchemaError(f"{path}: no village rows")
    try:
        census = Census(villages=tuple(villages))
    except ValueError as exc:
        raise CensusSchemaError(f"{path}: {exc}") from None
    if require_expected_areas:
        census.require_expected_areas()
    return census


def write_census(census: Census, path: str | Path) -> None:
    """Write a census to the documented CSV schema."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CENSUS_HEADER)
        for v in census.villages:
            writer.writerow([
                v.village_id, v.health_area_id, v.population,
                repr(v.distance_km), v.n_children, v.n_mcv1,
            ])


def load_profiles(path: str | Path) -> tuple[HealthAreaProfile, ...]:
    """Load a profile set from a JSON array of 12 objects."""
    path = Path(path)
    if not path.exists():
        raise CensusSchemaError(f"profile file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CensusSchemaError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(raw, list):
        raise CensusSchemaError(f"{path}: expected a JSON array of profiles")
    if len(raw) != EXPECTED_AREAS:
        raise CensusSchemaError(
            f"{path}: expected {EXPECTED_AREAS} profiles, got {len(raw)}"
        )
    profiles = []
    for i, obj in enumerate(raw):
        if not isinstance(obj, dict):
            raise CensusSchemaError(f"{path}: profile {i} is not an object")
        missing = [f for f in _PROFILE_FIELDS if f not in obj]
        if missing:
            raise CensusSchemaError(f"{path}: profile {i} missing fields {missing}")
        name = str(obj.get("name", f"area_{i + 1:02d}"))
        try:
            profiles.append(HealthAreaProfile(
                name=name,
                n_villages=int(obj["n_villages"]),
                **{f: float(obj[f]) for f in _PROFILE_FIELDS[1:]},
            ))
        except (TypeError, ValueError) as exc:
            raise CensusSchemaError(f"{path}: profile {i} ({name}): {exc}") from None
    return tuple(profiles)


# ---------------------------------------------------------------------------
# Built-in profile set (12 rural health areas from the baseline survey)
# ---------------------------------------------------------------------------

def _p(name, n, dm, ds, pm, ps, cm, cs, rm, rs):
    return HealthAreaProfile(name, n, dm, ds, pm, ps, cm, cs, rm, rs)


DEFAULT_PROFILES: tuple[HealthAreaProfile, ...] = (
    _p("Amerom", 37, 6.4, 3.3, 198.5, 267.0, 18.6, 26.9, 0.73, 0.20),
    _p("Blachidi", 28, 6.8, 4.2, 56.0, 69.8, 11.3, 7.5, 0.61, 0.23),
    _p("Boulorom", 16, 6.3, 4.5, 292.7, 260.7, 9.7, 5.4, 0.70, 0.36),
    _p("Hagerrom", 19, 4.6, 2.8, 276.7, 287.4, 14.2, 9.1, 0.75, 0.23),
    _p("Kalimba", 17, 4.3, 1.7, 233.5, 189.0, 12.2, 6.8, 0.70, 0.19),
    _p("Kindjira", 15, 2.7, 1.2, 302.8, 414.7, 11.1, 8.3, 0.87, 0.20),
    _p("Kournotoulo", 11, 2.93, 1.41, 467.7, 217.6, 18.5, 11.2, 0.75, 0.16),
    _p("Loulou Kamerom", 10, 3.70, 2.40, 302.9, 125.4, 11.8, 4.3, 0.74, 0.20),
    _p("Madem", 10, 2.82, 1.94, 312.5, 291.4, 14.8, 9.5, 0.66, 0.20),
    _p("Matoura", 14, 4.16, 2.19, 333.9, 236.1, 15.8, 11.1, 0.83, 0.19),
    _p("Safaye", 17, 4.06, 2.49, 286.5, 278.8, 13.4, 7.2, 0.68, 0.20),
    _p("Zingui", 6, 1.17, 0.60, 940.3, 404.7, 29.0, 17.1, 0.64, 0.16),
)


# ---------------------------------------------------------------------------
# Synthetic generation
# ---------------------------------------------------------------------------

def _draw_distance(profile: HealthAreaProfile, rng: np.random.Generator) -> float:
    if profile.distance_sd == 0.0:
        if profile.distance_mean < _MIN_DISTANCE_KM:
            raise GenerationError(
                f"profile {profile.name}: degenerate distance {profile.distance_mean} "
                f"below the {_MIN_DISTANCE_KM} km floor"
            )
        return profile.distance_mean
    for _ in range(_MAX_REJECTIONS):
        d = rng.normal(profile.distance_mean, profile.distance_sd)
        if d >= _MIN_DISTANCE_KM:
            return d
    raise GenerationError(
        f"profile {profile.name}: could not draw a distance >= {_MIN_DISTANCE_KM} km"
    )


def _truncated_count_moments(pmf: np.ndarray, floor: int) -> tuple[float, float, float]:
    """(mean, sd, mass) of a count distribution conditioned on >= floor."""
    k = np.arange(len(pmf), dtype=float)
    w = pmf[floor:]
    mass = float(np.sum(w))
    if mass <= 0.0:
        return math.inf, math.inf, 0.0
    kk = k[floor:]
    mean = float(np.sum(kk * w) / mass)
    var = float(np.sum(kk * kk * w) / mass) - mean * mean
    return mean, math.sqrt(max(var, 0.0)), mass


@lru_cache(maxsize=256)
def _solve_children_params(mean: float, sd: float) -> tuple[str, float, float]:
    """Count-distribution parameters whose >= 5 truncation hits (mean, sd).

    The profile moments describe analysis villages, which are already
    conditioned on having at least 5 children, so the matching has to
    target the truncated distribution rather than the raw one. Returns
    ("nbinom", r, p) or ("poisson", lam, 0).
    """
    floor = ANALYSIS_MIN_CHILDREN
    if mean <= floor:
        raise GenerationError(
            f"children mean {mean} cannot be matched above the >= {floor} floor"
        )
    top = int(mean + 30.0 * sd + 50.0)

    if sd * sd <= mean:
        # At or below Poisson dispersion: match the mean only.
        def poisson_gap(lam: float) -> float:
            pmf = stats.poisson.pmf(np.arange(top + 1), lam)
            return _truncated_count_moments(pmf, floor)[0] - mean

        lam = optimize.brentq(poisson_gap, 1e-6, mean + 10.0 * max(sd, 1.0),
                              xtol=1e-10)
        return ("poisson", float(lam), 0.0)

    def trunc(mu: float, r: float) -> tuple[float, float, float]:
        pmf = stats.nbinom.pmf(np.arange(top + 1), r, r / (r + mu))
        return _truncated_count_moments(pmf, floor)

    def residuals(theta: np.ndarray) -> np.ndarray:
        t_mean, t_sd, mass = trunc(math.exp(theta[0]), math.exp(theta[1]))
        if mass < 1e-12 or not math.isfinite(t_mean):
            return np.array([1e6, 1e6])
        return np.array([t_mean - mean, t_sd - sd])

    r0 = mean * mean / (sd * sd - mean)
    sol = optimize.least_squares(residuals, x0=[math.log(mean), math.log(r0)],
                                 xtol=1e-14, ftol=1e-14, gtol=1e-14)
    gap = np.abs(sol.fun)
    if gap[0] <= 1e-4 * mean and gap[1] <= 1e-4 * sd:
        mu, r = math.exp(sol.x[0]), math.exp(sol.x[1])
        return ("nbinom", float(r), float(r / (r + mu)))

    # The SD target can sit outside the truncated-NB frontier (some areas
    # have a few huge villages). Pin the mean exactly and take the closest
    # attainable SD; the dispersion floor keeps rejection sampling viable.
    def mu_for_mean(r: float) -> float:
        return math.exp(optimize.brentq(
            lambda lmu: trunc(math.exp(lmu), r)[0] - mean,
            math.log(1e-3), math.log(3.0 * mean + 100.0), xtol=1e-12))

    def sd_gap(log_r: float) -> float:
        r = math.exp(log_r)
        return (trunc(mu_for_mean(r), r)[1] - sd) ** 2

    best = optimize.minimize_scalar(sd_gap, bounds=(math.log(0.05), math.log(1e3)),
                                    method="bounded",
                                    options={"xatol": 1e-10})
    r = math.exp(best.x)
    mu = mu_for_mean(r)
    t_mean = trunc(mu, r)[0]
    if abs(t_mean - mean) > 1e-6 * mean:
        raise GenerationError(
            f"children mean {mean} not matchable by a >= {floor} truncated "
            f"negative binomial"
        )
    return ("nbinom", float(r), float(r / (r + mu)))


def _draw_children(profile: HealthAreaProfile, rng: np.random.Generator) -> int:
    mean, sd = profile.children_mean, profile.children_sd
    if sd == 0.0:
        m = int(round(mean))
        if m < ANALYSIS_MIN_CHILDREN:
            raise GenerationError(
                f"profile {profile.name}: degenerate children count {m} can never "
                f"reach the >= {ANALYSIS_MIN_CHILDREN} analysis floor"
            )
        return m
    try:
        family, a, b = _solve_children_params(mean, sd)
    except GenerationError as exc:
        raise GenerationError(f"profile {profile.name}: {exc}") from None
    for _ in range(_MAX_REJECTIONS):
        if family == "nbinom":
            m = int(rng.negative_binomial(a, b))
        else:
            m = int(rng.poisson(a))
        if m >= ANALYSIS_MIN_CHILDREN:
            return m
    raise GenerationError(
        f"profile {profile.name}: children >= {ANALYSIS_MIN_CHILDREN} rejection budget exhausted"
    )


def _draw_population(profile: HealthAreaProfile, n_children: int,
                     rng: np.random.Generator) -> int:
    mean, sd = profile.population_mean, profile.population_sd
    if sd == 0.0:
        p = int(round(mean))
        if p < n_children:
            raise GenerationError(
                f"profile {profile.name}: degenerate population {p} below a drawn "
                f"children count of {n_children}"
            )
        return p
    sigma2 = math.log1p((sd / mean) ** 2)
    mu = math.log(mean) - sigma2 / 2.0
    for _ in range(_MAX_REJECTIONS):
        p = int(round(rng.lognormal(mu, math.sqrt(sigma2))))
        if p >= max(n_children, 1):
            return p
    raise GenerationError(
        f"profile {profile.name}: population >= n_children rejection budget exhausted"
    )


def _draw_rate(profile: HealthAreaProfile, rng: np.random.Generator) -> float:
    mean, sd = profile.mcv1_rate_mean, profile.mcv1_rate_sd
    lo, hi = _RATE_CLIP
    if sd == 0.0:
        return min(max(mean, lo), hi)
    var = sd * sd
    spread = mean * (1.0 - mean)
    if var >= spread:
        raise GenerationError(
            f"profile {profile.name}: mcv1 rate sd {sd} incompatible with a beta "
            f"distribution at mean {mean}"
        )
    conc = spread / var - 1.0
    r = rng.beta(mean * conc, (1.0 - mean) * conc)
    return min(max(r, lo), hi)


def generate_synthetic_census(profiles: tuple[HealthAreaProfile, ...] = DEFAULT_PROFILES,
                              seed: int = 0) -> Census:
    """Draw a full census matched to the per-area profile moments.

    Per area: distance ~ normal truncated at 0.1 km; population ~
    moment-matched log-normal (redrawn until >= the village's children
    count); children ~ moment-matched negative binomial conditioned on
    >= 5 by rejection; village MCV1 rate ~ moment-matched beta clipped
    to (0.01, 0.99); n_mcv1 ~ Binomial(children, rate). Deterministic
    given (profiles, seed).
    """
    names = [p.name for p in profiles]
    if len(set(names)) != len(names):
        raise InputError(f"profile names must be distinct, got {names}")
    villages = []
    for area_index, profile in enumerate(profiles):
        rng = substream(seed, "census", area_index)
        for k in range(profile.n_villages):
            n_children = _draw_children(profile, rng)
            population = _draw_population(profile, n_children, rng)
            distance = _draw_distance(profile, rng)
            rate = _draw_rate(profile, rng)
            n_mcv1 = int(rng.binomial(n_children, rate))
            villages.append(Village(
                village_id=f"{profile.name}-{k + 1:03d}",
                health_area_id=profile.name,
                population=population,
                distance_km=distance,
                n_children=n_children,
                n_mcv1=n_mcv1,
            ))
    return Census(villages=tuple(villages))


# ---------------------------------------------------------------------------
# Summaries
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AreaSummary:
    """Descriptive statistics for one health area's analysis villages."""

    name: str
    n_villages: int
    distance_mean: float
    distance_sd: float
    population_mean: float
    population_sd: float
    children_mean: float
    children_sd: float
    mcv1_rate_mean: float
    mcv1_rate_sd: float
    total_children: int
    total_mcv1: int
    rate_median: float
    rate_q1: float
    rate_q3: float

    def as_profile(self) -> HealthAreaProfile:
        return HealthAreaProfile(
            name=self.name, n_villages=self.n_villages,
            distance_mean=self.distance_mean, distance_sd=self.distance_sd,
            population_mean=self.population_mean, population_sd=self.population_sd,
            children_mean=self.children_mean, children_sd=self.children_sd,
            mcv1_rate_mean=self.mcv1_rate_mean, mcv1_rate_sd=self.mcv1_rate_sd,
        )


def _mean_sd(values: np.ndarray) -> tuple[float, float]:
    # Single observation: SD reported as 0 by convention.
    mean = float(np.mean(values))
    sd = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
    return mean, sd


def summarize_census(census: Census) -> tuple[AreaSummary, ...]:
    """Per-area descriptive statistics over the analysis villages."""
    summaries = []
    for area in census.health_areas:
        vs = census.analysis_by_area[area]
        if not vs:
            raise InputError(f"health area {area!r} has no analysis villages to summarize")
        dist = np.array([v.distance_km for v in vs])
        pop = np.array([v.population for v in vs], dtype=float)
        children = np.array([v.n_children for v in vs], dtype=float)
        rates = np.array([v.mcv1_rate for v in vs])
        dm, dsd = _mean_sd(dist)
        pm, psd = _mean_sd(pop)
        cm, csd = _mean_sd(children)
        rm, rsd = _mean_sd(rates)
        q1, med, q3 = np.percentile(rates, [25, 50, 75])
        summaries.append(AreaSummary(
            name=area, n_villages=len(vs),
            distance_mean=dm, distance_sd=dsd,
            population_mean=pm, population_sd=psd,
            children_mean=cm, children_sd=csd,
            mcv1_rate_mean=rm, mcv1_rate_sd=rsd,
            total_children=int(sum(v.n_children for v in vs)),
            total_mcv1=int(sum(v.n_mcv1 for v in vs)),
            rate_median=float(med), rate_q1=float(q1), rate_q3=float(q3),
        ))
    return tuple(summaries)
