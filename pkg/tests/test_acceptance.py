"""End-to-end acceptance checks for the shipped workflow.

One test per release gate, each ending in a single printed PASS line with
the measured quantities (run pytest with -rA to see the checklist). The
statistical gates run the real engine at fixed seeds, so every number
here is reproducible bit for bit.
"""
import dataclasses
import math

import numpy as np
import pytest
from scipy import optimize, stats
from scipy.special import expit, ndtri

from crtsim.census import Census
from crtsim.closed_form import PowerInputs, cluster_size, power, power_plateau_limit
from crtsim.dgm import (
    CoefficientSet,
    Scenario,
    calibrate_intercepts,
    coefficient_set,
    tau2_from_icc,
)
from crtsim.engine import load_study_config, mcse, run_scenario, run_study
from crtsim.estimators import fit_beta_mle, fit_binomial_glm, beta_score
from crtsim.glmm_icc import (
    fit_fixed_logistic,
    fit_random_intercept,
    icc_from_tau2,
    standardize_population,
)
from crtsim.randomization import build_pool, smd


def _report(gate, detail):
    print(f"ACCEPTANCE {gate}: PASS ({detail})")


@pytest.fixture(scope="module")
def pool90(census):
    return build_pool(census, n_per_arm=90, n_attempts=4000, seed=11)


@pytest.fixture(scope="module")
def uniform_null(census):
    """Census whose villages all share one follow-up probability.

    Baseline counts are chosen so every empirical logit equals log 3
    exactly while the baseline-rate column still varies (four distinct
    child counts), keeping the regression designs full rank. Villages
    are duplicated once so the Wald tests run well inside their
    asymptotic regime. With delta 0, tau2 0 and zero covariate
    coefficients this makes every village an independent Binomial(m,
    cer) draw, the one configuration where all three tests should hit
    their nominal level.
    """
    sizes = (9, 13, 37, 41)
    villages = []
    k = 0
    for copy in (1, 2):
        for v in census.villages:
            m0 = sizes[k % 4]
            villages.append(dataclasses.replace(
                v, village_id=f"{v.village_id}-c{copy}", n_children=m0,
                n_mcv1=(3 * m0 + 1) // 4, population=max(v.population, m0)))
            k += 1
    flat = Census(villages=tuple(villages))
    return flat, build_pool(flat, n_per_arm=150, n_attempts=4000, seed=11)


# ---------------------------------------------------------------------------
# gate 1: closed-form power at the four enrollment levels
# ---------------------------------------------------------------------------

def test_closed_form_power_at_design_sizes():
    expected = {60: 0.794, 70: 0.801, 80: 0.805, 90: 0.809}
    worst = 0.0
    for villages_per_arm, want in expected.items():
        got = power(PowerInputs(m=cluster_size(villages_per_arm), c=6,
                                pi0=0.70, pi1=0.85, icc=0.048, alpha=0.05))
        worst = max(worst, abs(got - want))
        assert got == pytest.approx(want, abs=1e-3)
    _report("closed-form power at design sizes",
            f"max |power - expected| = {worst:.2e} over n in 60..90")


# ---------------------------------------------------------------------------
# gate 2: null calibration, formula and engine
# ---------------------------------------------------------------------------

def test_null_calibration_closed_form_and_engine(uniform_null):
    for alpha in (0.01, 0.05, 0.2):
        for m, c, icc in ((140.0, 6, 0.048), (72.0, 10, 0.2)):
            got = power(PowerInputs(m=m, c=c, pi0=0.70, pi1=0.70,
                                    icc=icc, alpha=alpha))
            assert got == pytest.approx(alpha, abs=1e-12)

    flat, pool = uniform_null
    scenario = Scenario(cer=0.5, delta=0.0, n_per_arm=150,
                        coef=CoefficientSet(0.0, 0.0), icc_v=0.0,
                        n_reps=2000, critical_z=float(ndtri(0.95)), seed=7)
    calib = calibrate_intercepts(flat, scenario)
    assert calib.tau2 == 0.0
    assert calib.delta_logit == 0.0
    summary = run_scenario(scenario, flat, pool, calib)
    details = []
    for name, m in summary.methods.items():
        interval = m.interval
        assert interval.ci_low <= 0.05 <= interval.ci_high, (
            f"{name} null rate {m.rate:.4f} has CI "
            f"({interval.ci_low:.4f}, {interval.ci_high:.4f}) excluding 0.05")
        details.append(f"{name} {m.rate:.4f}")
    _report("null calibration",
            "formula == alpha to 1e-12; engine rates " + ", ".join(details)
            + " all cover 0.05 at 2000 reps")


# ---------------------------------------------------------------------------
# gate 3: power plateaus in cluster size
# ---------------------------------------------------------------------------

def test_power_plateaus_in_cluster_size():
    limit = power_plateau_limit(c=6, pi0=0.70, pi1=0.85, icc=0.048, alpha=0.05)
    assert not limit.unbounded
    cluster_sizes = list(range(10, 1001)) + [2_000, 5_000, 10_000, 10**5, 10**6]
    powers = [power(PowerInputs(m=float(m), c=6, pi0=0.70, pi1=0.85,
                                icc=0.048, alpha=0.05)) for m in cluster_sizes]
    assert all(p < 0.8393 for p in powers)
    assert all(p < limit.power for p in powers)
    gap_at_million = limit.power - powers[-1]
    assert 0.0 < gap_at_million < 1e-3
    _report("power plateau",
            f"limit {limit.power:.6f}; power(m=1e6) short by {gap_at_million:.2e}; "
            f"all {len(cluster_sizes)} cluster sizes below 0.8393")


# ---------------------------------------------------------------------------
# gate 4: simulated power keeps rising with villages per arm
# ---------------------------------------------------------------------------

def test_simulated_power_rises_with_villages_per_arm(census, pool60, pool90):
    rates, ses = {}, {}
    for n, pool in ((60, pool60), (90, pool90)):
        scenario = Scenario(cer=0.70, delta=0.15, n_per_arm=n,
                            coef=coefficient_set(2), icc_v=0.24,
                            n_reps=500, critical_z=1.695, seed=2)
        calib = calibrate_intercepts(census, scenario)
        m = run_scenario(scenario, census, pool, calib).methods["beta"]
        rates[n], ses[n] = m.rate, m.interval.se
    gap = rates[90] - rates[60]
    combined = math.hypot(ses[60], ses[90])
    assert gap > 2.0 * combined, (
        f"beta power gap {gap:.4f} not above 2x combined MCSE {2 * combined:.4f}")
    _report("no plateau in simulated power",
            f"beta power {rates[60]:.3f} -> {rates[90]:.3f} at 60 -> 90 "
            f"villages/arm; gap {gap:.4f} > {2 * combined:.4f}")


# ---------------------------------------------------------------------------
# gate 5: type I error ordering between adjusted methods
# ---------------------------------------------------------------------------

def test_type_one_error_ordering(census, pool60):
    scenario = Scenario(cer=0.70, delta=0.0, n_per_arm=60,
                        coef=coefficient_set(2), icc_v=0.24,
                        n_reps=2000, critical_z=1.695, seed=23)
    calib = calibrate_intercepts(census, scenario)
    summary = run_scenario(scenario, census, pool60, calib)
    qb = summary.methods["quasibinomial"].rate
    beta = summary.methods["beta"].rate
    assert qb > beta
    assert 0.03 <= beta <= 0.07
    _report("type I error ordering",
            f"quasi-binomial {qb:.4f} > beta {beta:.4f}; beta within [0.03, 0.07]")


# ---------------------------------------------------------------------------
# gate 6: estimators agree with brute-force maximization
# ---------------------------------------------------------------------------

def _random_dataset(rng):
    from crtsim.estimators import AnalysisDataset

    n = int(rng.integers(8, 21))
    pop = rng.uniform(0.1, 2.0, size=n)
    dist = rng.uniform(0.5, 5.0, size=n)
    m = rng.integers(8, 30, size=n)
    p = expit(rng.normal(0.6, 0.5, size=n))
    y = np.clip(rng.binomial(m, p), 1, m - 1)
    return AnalysisDataset(
        y1=y.astype(float), m1=m.astype(float),
        arm=np.array([0.0] * (n - n // 2) + [1.0] * (n // 2)),
        baseline_rate=rng.uniform(0.3, 0.8, size=n),
        population=pop - pop.mean(), distance=dist - dist.mean(),
    )


def _fd_grad(f, th, h=1e-5):
    g = np.empty(len(th))
    for i in range(len(th)):
        step = h * max(1.0, abs(th[i]))
        hi, lo = th.copy(), th.copy()
        hi[i] += step
        lo[i] -= step
        g[i] = (f(hi) - f(lo)) / (2 * step)
    return g


def _fd_hess(f, th, h=1e-4):
    d = len(th)
    H = np.empty((d, d))
    f0 = f(th)
    hs = [h * max(1.0, abs(th[i])) for i in range(d)]
    for i in range(d):
        ei = np.zeros(d)
        ei[i] = hs[i]
        H[i, i] = (f(th + ei) - 2 * f0 + f(th - ei)) / hs[i] ** 2
        for j in range(i):
            ej = np.zeros(d)
            ej[j] = hs[j]
            H[i, j] = H[j, i] = (f(th + ei + ej) - f(th + ei - ej)
                                 - f(th - ei + ej) + f(th - ei - ej)) / (4 * hs[i] * hs[j])
    return H


def test_estimators_match_brute_force_oracles():
    rng = np.random.default_rng(77)
    worst_glm = 0.0
    for _ in range(50):
        d = _random_dataset(rng)
        X, y, m = d.design, d.y1, d.m1
        fit = fit_binomial_glm(X, y, m)
        assert fit.converged

        def nll(b):
            mu = expit(X @ b)
            return -float(np.sum(y * np.log(mu) + (m - y) * np.log1p(-mu)))

        def grad(b):
            return -(X.T @ (y - m * expit(X @ b)))

        res = optimize.minimize(nll, np.zeros(6), jac=grad, method="BFGS",
                                options={"gtol": 1e-10, "maxiter": 500})
        assert np.allclose(fit.beta, res.x, rtol=1e-6, atol=1e-8)
        used = np.abs(fit.beta - res.x) / (1e-6 * np.abs(res.x) + 1e-8)
        worst_glm = max(worst_glm, float(np.max(used)))

    rng = np.random.default_rng(2024)
    worst_beta = 0.0
    for _ in range(50):
        d = _random_dataset(rng)
        X = d.design
        mu = expit(X @ rng.normal(0.0, 0.4, size=6))
        r = np.clip(rng.beta(mu * 20.0, (1 - mu) * 20.0), 1e-4, 1 - 1e-4)
        fit = fit_beta_mle(X, r)
        assert fit.converged

        def bnll(th):
            muv = expit(X @ th[:-1])
            phi = math.exp(th[-1])
            val = stats.beta.logpdf(r, muv * phi, (1 - muv) * phi)
            return -float(np.sum(val)) if np.all(np.isfinite(val)) else 1e12

        start = np.append(np.zeros(6), math.log(5.0))
        res = optimize.minimize(bnll, start, method="L-BFGS-B",
                                options={"maxiter": 2000, "ftol": 1e-15,
                                         "gtol": 1e-9})
        sol = res.x
        for _ in range(30):
            step = np.linalg.solve(_fd_hess(bnll, sol), _fd_grad(bnll, sol))
            sol = sol - step
            if np.max(np.abs(step)) < 1e-9:
                break
        got = np.append(fit.beta, math.log(fit.phi))
        assert np.allclose(got, sol, rtol=1e-6, atol=1e-8)
        used = np.abs(got - sol) / (1e-6 * np.abs(sol) + 1e-8)
        worst_beta = max(worst_beta, float(np.max(used)))

    # analytic beta-regression score against central finite differences
    rng = np.random.default_rng(9)
    X = _random_dataset(rng).design[:12]
    n_obs = X.shape[0]
    r = rng.uniform(0.1, 0.9, size=n_obs)
    ystar = np.log(r / (1.0 - r))
    log_r, log_1mr = np.log(r), np.log(1.0 - r)

    def loglik(th):
        muv = expit(X @ th[:-1])
        phi = math.exp(th[-1])
        return float(np.sum(stats.beta.logpdf(r, muv * phi, (1 - muv) * phi)))

    for _ in range(10):
        th = np.append(rng.normal(0.0, 0.5, size=6), rng.normal(2.0, 0.5))
        analytic = beta_score(th, X, ystar, log_r, log_1mr)
        fd = np.empty(7)
        for i in range(7):
            h = 1e-6 * max(1.0, abs(th[i]))
            hi, lo = th.copy(), th.copy()
            hi[i] += h
            lo[i] -= h
            fd[i] = (loglik(hi) - loglik(lo)) / (2 * h)
        assert np.allclose(analytic, fd, rtol=1e-4, atol=1e-6)

    _report("estimator oracles",
            f"50+50 datasets within rtol 1e-6 (worst tolerance fraction: "
            f"binomial {worst_glm:.2f}, beta {worst_beta:.2f}); "
            "score matches FD to 1e-4")


# ---------------------------------------------------------------------------
# gate 7: constrained pool balance is exact
# ---------------------------------------------------------------------------

def test_pool_balance_exactness(census, pool60):
    villages = {v.village_id: v for v in census.analysis_villages}
    assert len(pool60.draws) > 0
    worst = 0.0
    for d in pool60.draws:
        assert d.avg_smd <= pool60.threshold
        assert d.avg_smd == (d.smd_pop + d.smd_dist + d.smd_mcv1) / 3.0
        worst = max(worst, d.avg_smd)
        t_sel = [villages[i] for i in d.selection.treatment_ids]
        c_sel = [villages[i] for i in d.selection.control_ids]
        stored = (d.smd_pop, d.smd_dist, d.smd_mcv1)
        for k, grab in enumerate((lambda v: float(v.population),
                                  lambda v: v.distance_km,
                                  lambda v: v.mcv1_rate)):
            t = [grab(v) for v in t_sel]
            c = [grab(v) for v in c_sel]
            assert smd(t, c) == smd(c, t)  # relabeling arms changes nothing
            assert smd(t, c) == pytest.approx(stored[k], rel=1e-12)
    _report("pool balance exactness",
            f"{len(pool60.draws)} accepted draws all have avg SMD <= "
            f"{pool60.threshold} (max {worst:.4f}); relabel symmetry exact")


# ---------------------------------------------------------------------------
# gate 8: Monte Carlo standard error interval
# ---------------------------------------------------------------------------

def test_mcse_interval_values():
    interval = mcse(0.083, 10_000)
    assert interval.se == pytest.approx(
        math.sqrt(0.083 * 0.917 / 10_000), abs=1e-15)
    # reference display (0.077, 0.088) truncates at the third decimal;
    # nearest rounding moves the lower bound by one final-digit unit
    truncated = (math.floor(interval.ci_low * 1000) / 1000,
                 math.floor(interval.ci_high * 1000) / 1000)
    assert truncated == (0.077, 0.088)
    # in thousandths: nearest rounding lands within one unit of the display
    assert round(interval.ci_high * 1000) == 88
    assert abs(round(interval.ci_low * 1000) - 77) <= 1
    _report("mcse interval",
            f"mcse(0.083, 10000) CI ({interval.ci_low:.5f}, "
            f"{interval.ci_high:.5f}) renders as (0.077, 0.088)")


# ---------------------------------------------------------------------------
# gate 9: intracluster correlation recovery and conversions
# ---------------------------------------------------------------------------

def _resimulated_baseline(census, tau2, seed):
    arr = census.arrays
    pop_std, _, _ = standardize_population(census)
    eta = fit_fixed_logistic(census).eta
    X = np.column_stack([np.ones(len(pop_std)), pop_std, arr.distance])
    rng = np.random.default_rng(seed)
    alpha = rng.normal(0.0, math.sqrt(tau2), size=len(pop_std))
    y = rng.binomial(arr.n_children.astype(int), expit(X @ eta + alpha))
    new_y = dict(zip(arr.village_ids, y))
    return Census(villages=tuple(
        dataclasses.replace(v, n_mcv1=int(new_y.get(v.village_id, v.n_mcv1)))
        for v in census.villages))


def test_icc_recovery_and_conversions(census):
    for icc in np.arange(0.0, 0.91, 0.01):
        assert icc_from_tau2(tau2_from_icc(icc)) == pytest.approx(icc, abs=1e-12)
    for tau2 in (0.0, 0.5, 1.0389057264304586, 2.0):
        assert tau2_from_icc(icc_from_tau2(tau2)) == pytest.approx(tau2, abs=1e-12)

    tau2 = tau2_from_icc(0.24)
    assert tau2 == pytest.approx(1.0389, abs=5e-5)
    estimates = []
    for seed in range(20):
        sim = _resimulated_baseline(census, tau2, seed=1000 + seed)
        fit = fit_random_intercept(sim, level="village")
        assert fit.converged
        estimates.append(fit.icc)
    err = abs(float(np.mean(estimates)) - 0.24)
    assert err <= 0.06
    _report("ICC recovery",
            f"mean estimate over 20 seeds off by {err:.4f} (limit 0.06); "
            "conversions invert to 1e-12")


# ---------------------------------------------------------------------------
# gate 10: byte-identical pipeline across worker counts
# ---------------------------------------------------------------------------

def test_pipeline_determinism_across_workers(tmp_path):
    raw = {
        "census": {"profiles": "default", "seed": 3},
        "pool": {"n_attempts": 1500, "threshold": 0.2},
        "grid": {
            "cer": [0.7], "delta": [0.0, 0.15], "n_per_arm": [60, 70],
            "coef_sets": [2], "icc_v": [0.24],
        },
        "n_reps_null": 30, "n_reps_alt": 15,
        "master_seed": 5,
    }
    outputs = []
    for name, workers in (("w1", 1), ("w2", 2), ("w2-again", 2)):
        cfg = load_study_config(raw, output_dir=str(tmp_path / name))
        result = run_study(cfg, workers=workers)
        outputs.append((result.results_csv.read_bytes(),
                        result.summary_json.read_bytes()))
    assert outputs[0] == outputs[1] == outputs[2]
    _report("pipeline determinism",
            f"{len(outputs[0][0])}-byte results identical for 1, 2, and "
            "repeated 2-worker runs")
