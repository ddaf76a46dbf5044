"""Conventional closed-form power for cluster randomized comparisons.

The cluster here is a health area: differences are tested between c
clusters per arm with m children per cluster, inflated by the design
effect 1 + (m-1) rho. Includes the recipe converting villages per arm
into an equivalent equal cluster size, and the m -> infinity plateau
limit that caps attainable power whenever rho > 0.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple

from scipy.special import ndtr, ndtri

POWER_CURVE_HEADER = ["m", "c", "pi0", "pi1", "icc", "alpha", "power"]

DEFAULT_CHILDREN_PER_VILLAGE = 14.0
DEFAULT_N_CLUSTERS = 12


@dataclass(frozen=True)
class PowerInputs:
    """Inputs to the closed-form power expression."""

    m: float
    c: int
    pi0: float
    pi1: float
    icc: float
    alpha: float

    def __post_init__(self):
        if self.m < 1:
            raise ValueError(f"m must be >= 1, got {self.m}")
        if self.c < 2:
            raise ValueError(f"c must be >= 2, got {self.c}")
        for name in ("pi0", "pi1"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if not 0.0 <= self.icc < 1.0:
            raise ValueError(f"icc must lie in [0, 1), got {self.icc}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")


def cluster_size(villages_per_arm: int, children_per_village: float = DEFAULT_CHILDREN_PER_VILLAGE,
                 n_clusters: int = DEFAULT_N_CLUSTERS) -> float:
    """Equal cluster size equivalent to a per-arm village selection.

    Spreads both arms' children evenly over the n_clusters clusters:
    m = 2 * villages_per_arm * children_per_village / n_clusters.
    """
    if villages_per_arm < 1 or children_per_village <= 0 or n_clusters < 1:
        raise ValueError("cluster_size arguments must be positive")
    return 2.0 * villages_per_arm * children_per_village / n_clusters


def power(inputs: PowerInputs) -> float:
    """Power of the one-sided two-proportion comparison between cluster means."""
    m, c = inputs.m, inputs.c
    pi0, pi1 = inputs.pi0, inputs.pi1
    numer = m * (c - 1) * (pi0 - pi1) ** 2
    denom = (pi0 * (1.0 - pi0) + pi1 * (1.0 - pi1)) * (1.0 + (m - 1.0) * inputs.icc)
    z_beta = math.sqrt(numer / denom) - ndtri(1.0 - inputs.alpha)
    return float(ndtr(z_beta))


class PlateauLimit(NamedTuple):
    power: float
    unbounded: bool


def power_plateau_limit(c: int, pi0: float, pi1: float, icc: float,
                        alpha: float) -> PlateauLimit:
    """Limit of power as the cluster size grows without bound.

    With icc = 0 the design effect disappears and power climbs to 1;
    that case is flagged unbounded rather than treated as a plateau.
    """
    PowerInputs(m=1, c=c, pi0=pi0, pi1=pi1, icc=icc, alpha=alpha)
    if icc == 0.0:
        return PlateauLimit(power=1.0, unbounded=True)
    numer = (c - 1) * (pi0 - pi1) ** 2
    denom = (pi0 * (1.0 - pi0) + pi1 * (1.0 - pi1)) * icc
    z_beta = math.sqrt(numer / denom) - ndtri(1.0 - alpha)
    return PlateauLimit(power=float(ndtr(z_beta)), unbounded=False)


def power_curve_rows(m_values: Iterable[float], c: int, pi0: float, pi1: float,
                     icc: float, alpha: float) -> list[dict]:
    """Power evaluated over a sweep of cluster sizes."""
    rows = []
    for m in m_values:
        p = power(PowerInputs(m=float(m), c=c, pi0=pi0, pi1=pi1, icc=icc, alpha=alpha))
        rows.append({"m": float(m), "c": c, "pi0": pi0, "pi1": pi1,
                     "icc": icc, "alpha": alpha, "power": p})
    return rows


def effect_curve_rows(m: float, c: int, pi0: float, deltas: Iterable[float],
                      icc: float, alpha: float) -> list[dict]:
    """Power evaluated over a sweep of absolute rate improvements."""
    rows = []
    for delta in deltas:
        pi1 = pi0 + float(delta)
        if not 0.0 < pi1 < 1.0:
            continue
        p = power(PowerInputs(m=m, c=c, pi0=pi0, pi1=pi1, icc=icc, alpha=alpha))
        rows.append({"m": m, "c": c, "pi0": pi0, "pi1": pi1,
                     "icc": icc, "alpha": alpha, "power": p})
    return rows


def write_power_curve(rows: list[dict], path: str | Path) -> None:
    """Persist sweep rows to the power-curve CSV schema."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(POWER_CURVE_HEADER)
        for row in rows:
            writer.writerow([repr(float(row["m"])), row["c"], repr(float(row["pi0"])),
                             repr(float(row["pi1"])), repr(float(row["icc"])),
                             repr(float(row["alpha"])), repr(float(row["power"]))])
