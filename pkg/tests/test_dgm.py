import math

import numpy as np
import pytest
from scipy.special import expit

from crtsim.census import Census, Village
from crtsim.dgm import (
    CoefficientSet,
    Scenario,
    calibrate_intercepts,
    coefficient_set,
    simulate_followup,
    tau2_from_icc,
)
from crtsim.errors import CalibrationError, ConfigError
from crtsim.glmm_icc import icc_from_tau2
from crtsim.randomization import draw_candidate, sample_from_pool
from crtsim.rngtools import substream


def centered_census(villages_per_area=2):
    # every village has y0 = m0/2, so all baseline logit offsets vanish
    villages = []
    for a in range(12):
        for k in range(villages_per_area):
            villages.append(Village(
                village_id=f"z{a:02d}-v{k}", health_area_id=f"z{a:02d}",
                population=150, distance_km=2.0, n_children=14, n_mcv1=7))
    return Census(villages=tuple(villages))


def scenario(**overrides):
    base = dict(cer=0.70, delta=0.15, n_per_arm=60, coef=coefficient_set(2),
                icc_v=0.24, n_reps=10, seed=0)
    base.update(overrides)
    return Scenario(**base)


# ---------------------------------------------------------------------------
# variance conversions and coefficient sets
# ---------------------------------------------------------------------------

def test_tau2_from_icc_values():
    assert tau2_from_icc(0.0) == 0.0
    assert tau2_from_icc(1 / 3) == pytest.approx(math.pi ** 2 / 6, rel=1e-14)
    assert tau2_from_icc(0.24) == pytest.approx(0.24 * (math.pi ** 2 / 3) / 0.76,
                                                rel=1e-14)
    assert tau2_from_icc(0.24) == pytest.approx(1.0389057, abs=5e-8)


def test_tau2_icc_mutual_inverses():
    for icc in np.arange(0.0, 0.91, 0.01):
        assert icc_from_tau2(tau2_from_icc(icc)) == pytest.approx(icc, abs=1e-12)


def test_tau2_from_icc_domain():
    with pytest.raises(ConfigError):
        tau2_from_icc(1.0)
    with pytest.raises(ConfigError):
        tau2_from_icc(-0.1)


def test_coefficient_sets():
    assert coefficient_set(1) == CoefficientSet(0.000268, -0.60630, 1)
    assert coefficient_set(2) == CoefficientSet(0.000370, -0.0867, 2)
    assert coefficient_set(3) == CoefficientSet(0.0004966, -0.0345, 3)
    with pytest.raises(ConfigError):
        coefficient_set(4)


# ---------------------------------------------------------------------------
# scenario validation
# ---------------------------------------------------------------------------

def test_scenario_rejects_impossible_rates():
    with pytest.raises(ConfigError):
        scenario(cer=0.95, delta=0.10)
    with pytest.raises(ConfigError):
        scenario(cer=0.0)
    with pytest.raises(ConfigError):
        scenario(n_reps=0)
    with pytest.raises(ConfigError):
        scenario(icc_v=1.0)


def test_scenario_derived_fields():
    s = scenario(cer=0.6, delta=0.2, icc_v=1 / 3)
    assert s.ter == pytest.approx(0.8)
    assert s.tau2 == pytest.approx(math.pi ** 2 / 6, rel=1e-14)
    assert s.critical_z == 1.695


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------

def test_calibration_degenerate_closed_form():
    # zero offsets, zero covariates, zero variance: beta0 = logit(cer)
    c = centered_census()
    s = scenario(cer=0.70, delta=0.0, icc_v=0.0, coef=CoefficientSet(0.0, 0.0),
                 n_per_arm=6)
    calib = calibrate_intercepts(c, s)
    assert calib.beta0 == pytest.approx(math.log(0.7 / 0.3), abs=1e-9)
    assert calib.delta_logit == 0.0
    assert calib.tau2 == 0.0


def test_calibration_null_effect_zero_offset(census):
    s = scenario(delta=0.0)
    calib = calibrate_intercepts(census, s)
    assert calib.delta_logit == 0.0


def test_calibration_idempotent(census):
    s = scenario()
    a = calibrate_intercepts(census, s)
    b = calibrate_intercepts(census, s)
    assert (a.beta0, a.delta_logit, a.tau2) == (b.beta0, b.delta_logit, b.tau2)


def test_calibration_unreachable_target(census):
    s = scenario(cer=1e-12, delta=0.0)
    with pytest.raises(CalibrationError):
        calibrate_intercepts(census, s)


def test_calibration_base_case_marginal_rates(census):
    # Monte Carlo oracle over the random intercept, all analysis villages
    s = scenario()
    calib = calibrate_intercepts(census, s)
    arr = census.arrays
    offsets = (arr.baseline_logit + s.coef.beta_pop * arr.population
               + s.coef.beta_dist * arr.distance)
    rng = np.random.default_rng(123)
    k = 5000
    alphas = rng.normal(0.0, math.sqrt(calib.tau2), size=(len(offsets), k))
    control = float(np.mean(expit(calib.beta0 + offsets[:, None] + alphas)))
    treated = float(np.mean(expit(calib.beta0 + calib.delta_logit
                                  + offsets[:, None] + alphas)))
    assert abs(control - 0.70) <= 0.001
    assert abs(treated - 0.85) <= 0.001


# ---------------------------------------------------------------------------
# follow-up simulation
# ---------------------------------------------------------------------------

def test_simulate_followup_reproducible(census, pool60):
    s = scenario()
    calib = calibrate_intercepts(census, s)
    draw = sample_from_pool(pool60, substream(0, "pick"))
    a = simulate_followup(census, draw, calib, s, substream(0, "sim"))
    b = simulate_followup(census, draw, calib, s, substream(0, "sim"))
    c = simulate_followup(census, draw, calib, s, substream(1, "sim"))
    assert a == b
    assert a != c


def test_simulate_followup_carries_denominators(census, pool60):
    s = scenario()
    calib = calibrate_intercepts(census, s)
    draw = sample_from_pool(pool60, substream(0, "pick"))
    by_id = {v.village_id: v for v in census.villages}
    out = simulate_followup(census, draw, calib, s, substream(0, "sim"))
    assert len(out) == 120
    for sv in out:
        assert sv.m1 == by_id[sv.village_id].n_children
        assert 0 <= sv.y1 <= sv.m1


def test_simulate_followup_ordering(census, pool60):
    s = scenario()
    calib = calibrate_intercepts(census, s)
    draw = sample_from_pool(pool60, substream(0, "pick"))
    out = simulate_followup(census, draw, calib, s, substream(0, "sim"))
    ids = [sv.village_id for sv in out]
    arms = [sv.arm for sv in out]
    assert arms == ["control"] * 60 + ["treatment"] * 60
    assert ids[:60] == sorted(draw.selection.control_ids)
    assert ids[60:] == sorted(draw.selection.treatment_ids)


def test_degenerate_model_hits_target_rate():
    c = centered_census()
    s = scenario(cer=0.70, delta=0.0, icc_v=0.0, coef=CoefficientSet(0.0, 0.0),
                 n_per_arm=6)
    calib = calibrate_intercepts(c, s)
    draw = draw_candidate(c, 6, substream(0, "draw"))
    total_y = 0
    total_m = 0
    for rep in range(400):
        for sv in simulate_followup(c, draw, calib, s, substream(0, "sim", rep)):
            total_y += sv.y1
            total_m += sv.m1
    rate = total_y / total_m
    se = math.sqrt(0.7 * 0.3 / total_m)
    assert abs(rate - 0.70) <= 4.0 * se


def test_effect_recovery_at_base_case(census, pool60):
    # treated-minus-control village mean rates approach delta
    s = scenario()
    calib = calibrate_intercepts(census, s)
    diffs = np.empty(10_000)
    for rep in range(len(diffs)):
        draw = sample_from_pool(pool60, substream(s.seed, "osel", rep))
        out = simulate_followup(census, draw, calib, s, substream(s.seed, "odgm", rep))
        rates = np.array([sv.y1 / sv.m1 for sv in out])
        diffs[rep] = rates[60:].mean() - rates[:60].mean()
    se = float(np.std(diffs, ddof=1)) / math.sqrt(len(diffs))
    assert abs(float(np.mean(diffs)) - 0.15) <= 4.0 * se
