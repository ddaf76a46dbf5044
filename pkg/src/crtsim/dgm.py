"""Follow-up outcome generation.

Village counts at follow-up come from a mixed-effects binomial model on
the logit scale: a calibrated intercept, a calibrated treatment offset,
a fresh village random intercept, the village's baseline empirical
logit, and population and distance terms with published coefficients.
Intercepts are calibrated by bisection against quadrature-computed
marginal rates so each arm hits its target village-level MCV1 rate.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy.special import expit

from .census import Census, empirical_logit_array
from .errors import CalibrationError, ConfigError
from .randomization import RandomizationDraw

LOGISTIC_VARIANCE = math.pi ** 2 / 3.0
DEFAULT_CRITICAL_Z = 1.695
_QUAD_ORDER = 41
_CALIBRATION_TOL = 1e-4
_LOGIT_BRACKET = 20.0


@dataclass(frozen=True)
class CoefficientSet:
    """Population and distance effects on the logit scale.

    Sets 1..3 are the catalogued lower-CI, point, and upper-CI values;
    set_index 0 marks an ad-hoc pair.
    """

    beta_pop: float
    beta_dist: float
    set_index: int = 0


_COEFFICIENT_CATALOG = {
    1: CoefficientSet(beta_pop=0.000268, beta_dist=-0.60630, set_index=1),
    2: CoefficientSet(beta_pop=0.000370, beta_dist=-0.0867, set_index=2),
    3: CoefficientSet(beta_pop=0.0004966, beta_dist=-0.0345, set_index=3),
}


def coefficient_set(index: int) -> CoefficientSet:
    """Catalogued coefficient set: 1 = lower CI, 2 = point estimate, 3 = upper CI."""
    try:
        return _COEFFICIENT_CATALOG[index]
    except KeyError:
        raise ConfigError(
            f"coefficient set index must be 1, 2, or 3, got {index}"
        ) from None


def tau2_from_icc(icc: float) -> float:
    """Random-intercept variance giving a village ICC of `icc` on the latent scale."""
    if not 0.0 <= icc < 1.0:
        raise ConfigError(f"icc must lie in [0, 1), got {icc}")
    return icc * LOGISTIC_VARIANCE / (1.0 - icc)


@dataclass(frozen=True)
class Scenario:
    """One cell of the simulation grid."""

    cer: float
    delta: float
    n_per_arm: int
    coef: CoefficientSet
    icc_v: float
    n_reps: int
    critical_z: float = DEFAULT_CRITICAL_Z
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.cer < 1.0:
            raise ConfigError(f"cer must lie in (0, 1), got {self.cer}")
        if self.delta < 0.0:
            raise ConfigError(f"delta must be >= 0, got {self.delta}")
        if self.cer + self.delta > 1.0:
            raise ConfigError(
                f"cer + delta must not exceed 1, got {self.cer} + {self.delta}"
            )
        if not 0.0 <= self.icc_v < 1.0:
            raise ConfigError(f"icc_v must lie in [0, 1), got {self.icc_v}")
        if self.n_per_arm < 1:
            raise ConfigError(f"n_per_arm must be >= 1, got {self.n_per_arm}")
        if self.n_reps < 1:
            raise ConfigError(f"n_reps must be >= 1, got {self.n_reps}")
        if self.critical_z <= 0:
            raise ConfigError(f"critical_z must be > 0, got {self.critical_z}")

    @property
    def ter(self) -> float:
        """Target treatment-arm rate."""
        return self.cer + self.delta

    @property
    def tau2(self) -> float:
        return tau2_from_icc(self.icc_v)


@dataclass(frozen=True)
class CalibratedIntercepts:
    beta0: float
    delta_logit: float
    tau2: float

    def __post_init__(self):
        if self.tau2 < 0:
            raise ValueError(f"tau2 must be >= 0, got {self.tau2}")


@dataclass(frozen=True)
class SimulatedVillage:
    """One village's follow-up outcome with its carried covariates."""

    village_id: str
    arm: str
    m1: int
    y1: int
    baseline_rate: float
    population: float
    distance_km: float

    def __post_init__(self):
        if not 0 <= self.y1 <= self.m1:
            raise ValueError(
                f"village {self.village_id}: y1 ({self.y1}) outside [0, m1={self.m1}]"
            )
        if self.arm not in ("control", "treatment"):
            raise ValueError(f"village {self.village_id}: bad arm {self.arm!r}")


class _MarginalRate:
    """Census-marginal expected village rate as a function of the intercept.

    The inner expectation over the N(0, tau2) random intercept uses
    fixed-order Gauss-Hermite quadrature; the outer average runs over
    every analysis village. Strictly increasing in the intercept.
    """

    def __init__(self, census: Census, coef: CoefficientSet, tau2: float):
        arr = census.arrays
        self.offsets = (arr.baseline_logit
                        + coef.beta_pop * arr.population
                        + coef.beta_dist * arr.distance)
        nodes, weights = hermgauss(_QUAD_ORDER)
        self.nodes = math.sqrt(2.0 * tau2) * nodes
        self.weights = weights / math.sqrt(math.pi)

    def __call__(self, intercept: float) -> float:
        probs = expit(self.offsets[:, None] + intercept + self.nodes[None, :])
        return float(np.mean(probs @ self.weights))


def _bisect_intercept(fn, target: float, what: str) -> float:
    lo, hi = -_LOGIT_BRACKET, _LOGIT_BRACKET
    if not fn(lo) <= target <= fn(hi):
        raise CalibrationError(
            f"{what}: target rate {target} unreachable for intercepts in "
            f"[{lo}, {hi}]"
        )
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if fn(mid) < target:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-12:
            break
    mid = 0.5 * (lo + hi)
    achieved = fn(mid)
    if abs(achieved - target) > _CALIBRATION_TOL:
        raise CalibrationError(
            f"{what}: bisection stopped at rate {achieved}, more than "
            f"{_CALIBRATION_TOL} from target {target}"
        )
    return mid


def calibrate_intercepts(census: Census, scenario: Scenario) -> CalibratedIntercepts:
    """Find (beta0, delta_logit) hitting the arm-level target rates.

    beta0 solves marginal(beta0) = cer; delta_logit then solves
    marginal(beta0 + delta_logit) = cer + delta. Both marginals average
    over all analysis villages, since any village may land in either
    arm. Deterministic: no Monte Carlo enters the calibration.
    """
    marginal = _MarginalRate(census, scenario.coef, scenario.tau2)
    beta0 = _bisect_intercept(marginal, scenario.cer, "control intercept")
    if scenario.delta == 0.0:
        delta_logit = 0.0
    else:
        total = _bisect_intercept(marginal, scenario.ter, "treatment intercept")
        delta_logit = total - beta0
    return CalibratedIntercepts(beta0=beta0, delta_logit=delta_logit,
                                tau2=scenario.tau2)


@dataclass
class _DrawArrays:
    """Covariate arrays for one draw's selected villages in canonical order."""

    ids: list[str]
    arm: np.ndarray
    m0: np.ndarray
    offsets: np.ndarray
    baseline_rate: np.ndarray
    population: np.ndarray
    distance: np.ndarray


_DRAW_CACHE: dict[tuple[int, int, int], _DrawArrays] = {}


def _draw_arrays(census: Census, draw: RandomizationDraw,
                 coef: CoefficientSet) -> _DrawArrays:
    key = (id(census), id(draw), id(coef))
    cached = _DRAW_CACHE.get(key)
    if cached is not None:
        return cached
    arr = census.arrays
    ids = list(draw.selection.control_ids) + list(draw.selection.treatment_ids)
    idx = np.array([arr.index_of[v] for v in ids], dtype=np.intp)
    n_c = len(draw.selection.control_ids)
    arm = np.zeros(len(ids))
    arm[n_c:] = 1.0
    offsets = (arr.baseline_logit[idx]
               + coef.beta_pop * arr.population[idx]
               + coef.beta_dist * arr.distance[idx])
    out = _DrawArrays(
        ids=ids, arm=arm, m0=arr.n_children[idx], offsets=offsets,
        baseline_rate=arr.baseline_rate[idx],
        population=arr.population[idx], distance=arr.distance[idx],
    )
    if len(_DRAW_CACHE) > 20000:
        _DRAW_CACHE.clear()
    _DRAW_CACHE[key] = out
    return out


def simulate_followup(census: Census, draw: RandomizationDraw,
                      calib: CalibratedIntercepts, scenario: Scenario,
                      rng: np.random.Generator) -> list[SimulatedVillage]:
    """Simulate one replicate of follow-up counts for the draw's villages.

    Denominators carry forward (no loss to follow-up). Control villages
    come first, then treatment, each block sorted by village id.
    """
    d = _draw_arrays(census, draw, scenario.coef)
    alpha = rng.normal(0.0, math.sqrt(calib.tau2), size=len(d.ids))
    eta = calib.beta0 + calib.delta_logit * d.arm + alpha + d.offsets
    y1 = rng.binomial(d.m0, expit(eta))
    return [
        SimulatedVillage(
            village_id=d.ids[j],
            arm="treatment" if d.arm[j] else "control",
            m1=int(d.m0[j]), y1=int(y1[j]),
            baseline_rate=float(d.baseline_rate[j]),
            population=float(d.population[j]),
            distance_km=float(d.distance[j]),
        )
        for j in range(len(d.ids))
    ]
