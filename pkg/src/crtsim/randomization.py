"""Covariate-constrained randomization pool.

Samples 6:6 health-area allocations, apportions the per-arm village
selections proportionally to area size, scores each candidate by the
average absolute standardized mean difference (SMD) across three
village-level covariates (population, distance, baseline MCV1 rate),
and retains candidates whose average SMD does not exceed a threshold.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .census import Census
from .errors import CapacityError, EmptyPoolError, InputError
from .rngtools import substream

POOL_HEADER = ["draw_id", "allocation_bitmask", "smd_pop", "smd_dist", "smd_mcv1",
               "avg_smd", "selection_blob"]
DEFAULT_SMD_THRESHOLD = 0.2


def smd(values_t, values_c) -> float:
    """Absolute standardized mean difference between two groups.

    Cohen's d with the average-variance pooled SD and n-1 sample
    variances. Equal means give exactly 0 regardless of variance; a
    zero pooled SD with unequal means returns the +infinity sentinel
    so the draw is always rejected.
    """
    t = np.asarray(values_t, dtype=float)
    c = np.asarray(values_c, dtype=float)
    if t.size < 2 or c.size < 2:
        raise ValueError("smd needs at least 2 values per group")
    mean_t = float(np.mean(t))
    mean_c = float(np.mean(c))
    if mean_t == mean_c:
        return 0.0
    pooled = math.sqrt((np.var(t, ddof=1) + np.var(c, ddof=1)) / 2.0)
    if pooled == 0.0:
        return math.inf
    return abs(mean_t - mean_c) / pooled


@dataclass(frozen=True)
class Allocation:
    """6:6 split of health areas into control and treatment arms."""

    control_areas: tuple[str, ...]
    treatment_areas: tuple[str, ...]

    def __post_init__(self):
        if len(self.control_areas) != len(self.treatment_areas):
            raise ValueError("arms must contain equally many health areas")
        if set(self.control_areas) & set(self.treatment_areas):
            raise ValueError("an area cannot sit in both arms")
        object.__setattr__(self, "control_areas", tuple(sorted(self.control_areas)))
        object.__setattr__(self, "treatment_areas", tuple(sorted(self.treatment_areas)))

    @cached_property
    def arm_of(self) -> dict[str, str]:
        out = {a: "control" for a in self.control_areas}
        out.update({a: "treatment" for a in self.treatment_areas})
        return out

    def bitmask(self, areas: tuple[str, ...]) -> int:
        """Treatment mask with bit i set for the i-th area in `areas`."""
        index = {a: i for i, a in enumerate(areas)}
        mask = 0
        for a in self.treatment_areas:
            mask |= 1 << index[a]
        return mask

    @classmethod
    def from_bitmask(cls, mask: int, areas: tuple[str, ...]) -> "Allocation":
        if not 0 <= mask < (1 << len(areas)):
            raise InputError(f"allocation bitmask {mask} out of range for {len(areas)} areas")
        treatment = tuple(a for i, a in enumerate(areas) if mask >> i & 1)
        control = tuple(a for i, a in enumerate(areas) if not mask >> i & 1)
        return cls(control_areas=control, treatment_areas=treatment)


@dataclass(frozen=True)
class VillageSelection:
    """Village ids selected for outcome collection, n_per_arm per arm."""

    control_ids: tuple[str, ...]
    treatment_ids: tuple[str, ...]
    n_per_arm: int

    def __post_init__(self):
        if len(self.control_ids) != self.n_per_arm or len(self.treatment_ids) != self.n_per_arm:
            raise ValueError(
                f"selection sizes ({len(self.control_ids)}, {len(self.treatment_ids)}) "
                f"must both equal n_per_arm ({self.n_per_arm})"
            )
        object.__setattr__(self, "control_ids", tuple(sorted(self.control_ids)))
        object.__setattr__(self, "treatment_ids", tuple(sorted(self.treatment_ids)))


@dataclass(frozen=True)
class RandomizationDraw:
    """One candidate allocation with its balance scores."""

    draw_id: int
    allocation: Allocation
    selection: VillageSelection
    smd_pop: float
    smd_dist: float
    smd_mcv1: float
    avg_smd: float


def _avg_smd(s1: float, s2: float, s3: float) -> float:
    return (s1 + s2 + s3) / 3.0


@dataclass(frozen=True)
class ConstrainedPool:
    """Accepted draws plus generation metadata.

    Metadata fields are None on pools loaded from a CSV artifact, which
    records only the draws themselves.
    """

    draws: tuple[RandomizationDraw, ...]
    threshold: float | None
    n_attempted: int | None
    seed: int | None

    def __post_init__(self):
        if self.threshold is not None:
            for d in self.draws:
                if not d.avg_smd <= self.threshold:
                    raise ValueError(
                        f"draw {d.draw_id} has avg_smd {d.avg_smd} above "
                        f"threshold {self.threshold}"
                    )

    @property
    def acceptance_rate(self) -> float:
        if not self.n_attempted:
            return float("nan")
        return len(self.draws) / self.n_attempted

    @property
    def n_per_arm(self) -> int:
        if not self.draws:
            raise EmptyPoolError("pool holds no draws")
        return self.draws[0].selection.n_per_arm


def largest_remainder(counts: list[int], total: int) -> list[int]:
    """Apportion `total` seats proportionally to `counts`, capped by them.

    Hamilton's method: floor the proportional shares, then hand the
    leftover seats to the largest fractional remainders. Remainder ties
    break toward the larger count, then the lower index. A quota never
    exceeds its count; any excess is redistributed among unsaturated
    entries by the same rule.
    """
    if total < 0:
        raise ValueError("total must be >= 0")
    if any(c < 0 for c in counts):
        raise ValueError("counts must be >= 0")
    if sum(counts) < total:
        raise CapacityError(
            f"cannot apportion {total} seats over capacities summing to {sum(counts)}"
        )
    quotas = [0] * len(counts)
    active = [i for i, c in enumerate(counts) if c > 0]
    remaining = total
    while remaining > 0:
        weight = sum(counts[i] for i in active)
        shares = {i: counts[i] * remaining / weight for i in active}
        floors = {i: min(math.floor(shares[i]), counts[i] - quotas[i]) for i in active}
        leftover = remaining - sum(floors.values())
        order = sorted(active, key=lambda i: (-(shares[i] - floors[i]), -counts[i], i))
        for i in order:
            if leftover == 0:
                break
            if quotas[i] + floors[i] < counts[i]:
                floors[i] += 1
                leftover -= 1
        progressed = 0
        for i in active:
            quotas[i] += floors[i]
            progressed += floors[i]
        remaining -= progressed
        active = [i for i in active if quotas[i] < counts[i]]
        if remaining > 0 and progressed == 0:
            raise CapacityError("apportionment stalled before placing every seat")
    return quotas


def apportion_villages(census: Census, allocation: Allocation,
                       n_per_arm: int) -> dict[str, int]:
    """Per-area village quotas, n_per_arm per arm, proportional to area size."""
    if n_per_arm < 1:
        raise InputError(f"n_per_arm must be >= 1, got {n_per_arm}")
    quotas: dict[str, int] = {}
    for arm, areas in (("control", allocation.control_areas),
                       ("treatment", allocation.treatment_areas)):
        counts = [len(census.analysis_by_area.get(a, ())) for a in areas]
        if sum(counts) < n_per_arm:
            raise CapacityError(
                f"{arm} arm has {sum(counts)} analysis villages across "
                f"{len(areas)} areas, fewer than n_per_arm = {n_per_arm}"
            )
        for a, q in zip(areas, largest_remainder(counts, n_per_arm)):
            quotas[a] = q
    return quotas


class _AreaTable:
    """Per-area covariate arrays cached for fast repeated candidate draws."""

    def __init__(self, census: Census):
        census.require_expected_areas()
        self.census = census
        self.areas = census.health_areas
        self.ids: list[str] = []
        self.offsets: list[int] = []
        self.counts: list[int] = []
        rows = []
        for area in self.areas:
            vs = census.analysis_by_area[area]
            self.offsets.append(len(self.ids))
            self.counts.append(len(vs))
            self.ids.extend(v.village_id for v in vs)
            rows.extend((float(v.population), v.distance_km, v.mcv1_rate)
                        for v in vs)
        # covariate matrix: rows population / distance / mcv1 rate
        self.cov = np.array(rows, dtype=float).T
        self._alloc_cache: dict[tuple[int, int], tuple[Allocation, list[int]]] = {}

    def allocation_for(self, treated_mask: int,
                       n_per_arm: int) -> tuple[Allocation, list[int]]:
        """Allocation object and per-area quotas, memoized per mask.

        Infeasible masks are memoized as well so retrying them stays cheap.
        """
        key = (treated_mask, n_per_arm)
        entry = self._alloc_cache.get(key)
        if entry is None:
            allocation = Allocation.from_bitmask(treated_mask, tuple(self.areas))
            try:
                quota_map = apportion_villages(self.census, allocation, n_per_arm)
            except CapacityError as exc:
                self._alloc_cache[key] = (None, str(exc))
                raise
            entry = (allocation, [quota_map[a] for a in self.areas])
            self._alloc_cache[key] = entry
        if entry[0] is None:
            raise CapacityError(entry[1])
        return entry


_TABLE_CACHE: dict[int, _AreaTable] = {}


def _area_table(census: Census) -> _AreaTable:
    table = _TABLE_CACHE.get(id(census))
    if table is None:
        table = _AreaTable(census)
        _TABLE_CACHE.clear()
        _TABLE_CACHE[id(census)] = table
    return table


def _smd_rows(sel_t: np.ndarray, sel_c: np.ndarray) -> tuple[float, ...]:
    # row-wise smd(); identical arithmetic to the scalar version
    mean_t = np.mean(sel_t, axis=1)
    mean_c = np.mean(sel_c, axis=1)
    var_t = np.var(sel_t, axis=1, ddof=1)
    var_c = np.var(sel_c, axis=1, ddof=1)
    out = []
    for k in range(sel_t.shape[0]):
        if mean_t[k] == mean_c[k]:
            out.append(0.0)
            continue
        pooled = math.sqrt((var_t[k] + var_c[k]) / 2.0)
        out.append(float(abs(mean_t[k] - mean_c[k])) / pooled if pooled else math.inf)
    return tuple(out)


def draw_candidate(census: Census, n_per_arm: int, rng: np.random.Generator,
                   draw_id: int = 0) -> RandomizationDraw:
    """One uniform candidate: allocation, proportional selection, SMDs."""
    table = _area_table(census)
    n_areas = len(table.areas)
    treated_idx = rng.choice(n_areas, size=n_areas // 2, replace=False)
    mask = 0
    for i in treated_idx:
        mask |= 1 << int(i)
    allocation, quotas = table.allocation_for(mask, n_per_arm)
    picked: dict[str, list[np.ndarray]] = {"control": [], "treatment": []}
    # Areas are visited in lexicographic order so the stream consumption
    # pattern is independent of which arm an area landed in.
    for i in range(n_areas):
        q = quotas[i]
        if q == 0:
            continue
        count = table.counts[i]
        if q == count:
            take = np.arange(count)
        else:
            take = rng.choice(count, size=q, replace=False)
        arm = "treatment" if mask >> i & 1 else "control"
        picked[arm].append(table.offsets[i] + take)
    idx_c = np.concatenate(picked["control"])
    idx_t = np.concatenate(picked["treatment"])
    s_pop, s_dist, s_rate = _smd_rows(table.cov[:, idx_t], table.cov[:, idx_c])
    return RandomizationDraw(
        draw_id=draw_id,
        allocation=allocation,
        selection=VillageSelection(
            control_ids=tuple(table.ids[g] for g in idx_c),
            treatment_ids=tuple(table.ids[g] for g in idx_t),
            n_per_arm=n_per_arm,
        ),
        smd_pop=s_pop,
        smd_dist=s_dist,
        smd_mcv1=s_rate,
        avg_smd=_avg_smd(s_pop, s_dist, s_rate),
    )


def build_pool(census: Census, n_per_arm: int, n_attempts: int,
               threshold: float = DEFAULT_SMD_THRESHOLD, seed: int = 0) -> ConstrainedPool:
    """Run n_attempts candidate draws and keep those with avg_smd <= threshold.

    Each attempt runs on its own substream keyed by (seed, attempt
    index), so the accepted set is identical no matter how attempts are
    scheduled across workers.
    """
    if threshold <= 0:
        raise InputError(f"threshold must be > 0, got {threshold}")
    if n_attempts < 1:
        raise InputError(f"n_attempts must be >= 1, got {n_attempts}")
    accepted = []
    for attempt in range(n_attempts):
        try:
            draw = draw_candidate(census, n_per_arm,
                                  substream(seed, "pool", attempt), draw_id=attempt)
        except CapacityError:
            # allocation cannot seat n_per_arm villages in some arm; treat
            # the candidate as rejected rather than aborting the build
            continue
        if draw.avg_smd <= threshold:
            accepted.append(draw)
    if not accepted:
        raise EmptyPoolError(
            f"no draw out of {n_attempts} met avg_smd <= {threshold}; "
            f"relax the threshold or raise the attempt budget"
        )
    return ConstrainedPool(draws=tuple(accepted), threshold=threshold,
                           n_attempted=n_attempts, seed=seed)


def sample_from_pool(pool: ConstrainedPool, rng: np.random.Generator) -> RandomizationDraw:
    """Uniform draw from the accepted list."""
    if not pool.draws:
        raise EmptyPoolError("cannot sample from an empty pool")
    return pool.draws[int(rng.integers(len(pool.draws)))]


# ---------------------------------------------------------------------------
# Pool persistence
# ---------------------------------------------------------------------------

def write_pool(pool: ConstrainedPool, path: str | Path) -> None:
    """Persist accepted draws to the documented CSV schema."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(POOL_HEADER)
        for d in pool.draws:
            areas = tuple(sorted(d.allocation.arm_of))
            blob = ";".join(d.selection.control_ids) + "|" + ";".join(d.selection.treatment_ids)
            writer.writerow([
                d.draw_id, d.allocation.bitmask(areas),
                repr(d.smd_pop), repr(d.smd_dist), repr(d.smd_mcv1), repr(d.avg_smd),
                blob,
            ])


def load_pool(path: str | Path, census: Census, *,
              threshold: float | None = None) -> ConstrainedPool:
    """Load a pool CSV back against its census.

    Validates that every selection refers to known analysis villages in
    areas of the right arm. Generation metadata is not stored in the
    artifact; pass `threshold` to re-assert the acceptance bound.
    """
    path = Path(path)
    if not path.exists():
        raise InputError(f"pool file not found: {path}")
    areas = census.health_areas
    known: dict[str, str] = {v.village_id: v.health_area_id for v in census.analysis_villages}
    draws = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != POOL_HEADER:
            raise InputError(f"{path}: bad header {header!r}, expected {POOL_HEADER!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(POOL_HEADER):
                raise InputError(f"{path}: row {lineno} has {len(row)} fields")
            try:
                draw_id = int(row[0])
                allocation = Allocation.from_bitmask(int(row[1]), areas)
                s_pop, s_dist, s_rate, avg = (float(x) for x in row[2:6])
                control_blob, _, treatment_blob = row[6].partition("|")
                control_ids = tuple(control_blob.split(";")) if control_blob else ()
                treatment_ids = tuple(treatment_blob.split(";")) if treatment_blob else ()
                n_per_arm = len(control_ids)
                selection = VillageSelection(control_ids=control_ids,
                                             treatment_ids=treatment_ids,
                                             n_per_arm=n_per_arm)
            except (ValueError, InputError) as exc:
                raise InputError(f"{path}: row {lineno}: {exc}") from None
            for ids, arm_areas, arm in (
                (selection.control_ids, set(allocation.control_areas), "control"),
                (selection.treatment_ids, set(allocation.treatment_areas), "treatment"),
            ):
                for vid in ids:
                    area = known.get(vid)
                    if area is None:
                        raise InputError(
                            f"{path}: row {lineno}: unknown village {vid!r}"
                        )
                    if area not in arm_areas:
                        raise InputError(
                            f"{path}: row {lineno}: village {vid!r} lies in {area!r}, "
                            f"not in a {arm}-arm area"
                        )
            draws.append(RandomizationDraw(
                draw_id=draw_id, allocation=allocation, selection=selection,
                smd_pop=s_pop, smd_dist=s_dist, smd_mcv1=s_rate, avg_smd=avg,
            ))
    if not draws:
        raise EmptyPoolError(f"{path}: pool file holds no draws")
    sizes = {d.selection.n_per_arm for d in draws}
    if len(sizes) != 1:
        raise InputError(f"{path}: mixed n_per_arm values {sorted(sizes)}")
    return ConstrainedPool(draws=tuple(draws), threshold=threshold,
                           n_attempted=None, seed=None)
