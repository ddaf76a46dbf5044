"""Baseline intra-cluster correlation estimation.

Fits the baseline vaccination counts with a fixed-effects logistic
model (the source of the population and distance coefficient sets) and
with random-intercept logistic models at the village or health-zone
level. The random-intercept marginal likelihood integrates each
cluster's Gaussian intercept by adaptive Gauss-Hermite quadrature
centered at the conditional mode; the ICC derives from the fitted
intercept variance against the logistic residual variance pi^2/3.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy.optimize import minimize
from scipy.special import expit, gammaln, log_expit

from .census import Census
from .dgm import LOGISTIC_VARIANCE
from .errors import ConfigError, SingularDesignError
from .estimators import fit_binomial_glm

LEVELS = ("village", "health_zone")
DEFAULT_N_QUAD = 25
_MODE_TOL = 1e-12
_MODE_MAX_ITER = 100
_LOG_TAU_BOUNDS = (-8.0, 3.0)
_TAU2_FLOOR = 1e-4
_GRAD_TOL = 1e-6


def icc_from_tau2(tau2: float) -> float:
    """Latent-scale ICC for a random-intercept variance of tau2."""
    if tau2 < 0:
        raise ConfigError(f"tau2 must be >= 0, got {tau2}")
    return tau2 / (LOGISTIC_VARIANCE + tau2)


def standardize_population(census: Census) -> tuple[np.ndarray, float, float]:
    """Center and scale village populations; returns (values, mean, sd)."""
    pop = census.arrays.population
    if len(pop) < 2:
        raise SingularDesignError("standardization needs at least 2 villages")
    mean = float(np.mean(pop))
    sd = float(np.std(pop, ddof=1))
    if sd == 0.0:
        raise SingularDesignError("village populations are constant; cannot standardize")
    return (pop - mean) / sd, mean, sd


@dataclass(frozen=True)
class FixedLogisticFit:
    """Fixed-effects logistic fit of baseline counts on population and distance."""

    eta: np.ndarray
    se: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    eta_raw: np.ndarray
    loglik: float
    converged: bool
    pop_mean: float
    pop_sd: float


def fit_fixed_logistic(census: Census) -> FixedLogisticFit:
    """Binomial MLE of logit(rate) ~ standardized population + distance.

    Coefficients are reported on the standardized scale with Wald 95%
    intervals, plus a raw-scale translation (persons and km units).
    A covariate with zero variance is dropped from the design and
    reported with a zero coefficient, collapsing toward the
    intercept-only model rather than failing on rank.
    """
    arr = census.arrays
    n = len(arr.village_ids)
    pop_varies = float(np.std(arr.population, ddof=0)) > 0.0
    dist_varies = float(np.std(arr.distance, ddof=0)) > 0.0
    if pop_varies:
        pop_std, pop_mean, pop_sd = standardize_population(census)
    else:
        pop_std = np.zeros(n)
        pop_mean, pop_sd = float(arr.population[0]), 1.0
    columns = [np.ones(n)]
    used = [0]
    if pop_varies:
        columns.append(pop_std)
        used.append(1)
    if dist_varies:
        columns.append(arr.distance)
        used.append(2)
    fit = fit_binomial_glm(np.column_stack(columns),
                           arr.n_mcv1.astype(float), arr.n_children.astype(float))
    eta = np.zeros(3)
    se = np.zeros(3)
    eta[used] = fit.beta
    se[used] = np.sqrt(np.diag(fit.cov_unscaled))
    eta_raw = np.array([
        eta[0] - eta[1] * pop_mean / pop_sd,
        eta[1] / pop_sd,
        eta[2],
    ])
    return FixedLogisticFit(
        eta=eta, se=se, ci_low=eta - 1.96 * se, ci_high=eta + 1.96 * se,
        eta_raw=eta_raw, loglik=fit.loglik, converged=fit.converged,
        pop_mean=pop_mean, pop_sd=pop_sd,
    )


@dataclass(frozen=True)
class GlmmFit:
    level: str
    eta: np.ndarray
    tau2: float
    icc: float
    loglik: float
    converged: bool
    n_quad: int
    boundary: bool

    def report(self) -> dict:
        return {
            "level": self.level,
            "eta": [float(v) for v in self.eta],
            "tau2": float(self.tau2),
            "icc": float(self.icc),
            "loglik": float(self.loglik),
            "converged": bool(self.converged),
            "n_quad": int(self.n_quad),
            "boundary": bool(self.boundary),
        }


def write_report(fit: GlmmFit, path: str | Path) -> None:
    Path(path).write_text(json.dumps(fit.report(), indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


class _MarginalLoglik:
    """Marginal log-likelihood of the random-intercept logistic model.

    Rows are villages; `cid` maps each row to its cluster (villages
    themselves or health zones). Per cluster the intercept integral is
    evaluated on Gauss-Hermite nodes recentred at the conditional mode
    and rescaled by the conditional curvature.
    """

    def __init__(self, X: np.ndarray, y: np.ndarray, m: np.ndarray,
                 cid: np.ndarray, n_quad: int):
        self.X = X
        self.y = y
        self.m = m
        self.cid = cid
        self.n_clusters = int(cid.max()) + 1
        nodes, weights = hermgauss(n_quad)
        self.nodes = nodes
        self.log_weights = np.log(weights) + nodes ** 2
        self.binom_const = float(np.sum(
            gammaln(m + 1) - gammaln(y + 1) - gammaln(m - y + 1)
        ))

    def _cluster_sum(self, values: np.ndarray) -> np.ndarray:
        return np.bincount(self.cid, weights=values, minlength=self.n_clusters)

    def _modes(self, fixed: np.ndarray, tau2: float) -> tuple[np.ndarray, np.ndarray]:
        """Per-cluster posterior mode and curvature of the intercept."""
        u = np.zeros(self.n_clusters)
        for _ in range(_MODE_MAX_ITER):
            p = expit(fixed + u[self.cid])
            grad = self._cluster_sum(self.y - self.m * p) - u / tau2
            curv = -self._cluster_sum(self.m * p * (1.0 - p)) - 1.0 / tau2
            step = np.clip(-grad / curv, -5.0, 5.0)
            u = u + step
            if np.max(np.abs(step)) < _MODE_TOL:
                break
        p = expit(fixed + u[self.cid])
        curv = -self._cluster_sum(self.m * p * (1.0 - p)) - 1.0 / tau2
        return u, curv

    def __call__(self, eta: np.ndarray, tau2: float) -> float:
        return self.value_and_grad(eta, tau2)[0]

    def value_and_grad(self, eta: np.ndarray,
                       tau2: float) -> tuple[float, np.ndarray]:
        """Log-likelihood and its gradient in (eta, log tau).

        The gradient is the posterior expectation of the complete-data
        score, evaluated on the same quadrature nodes, so it is exact
        up to quadrature error.
        """
        fixed = self.X @ eta
        if tau2 <= 0.0:
            p = expit(fixed)
            ll = np.sum(self.y * log_expit(fixed) + (self.m - self.y) * log_expit(-fixed))
            grad_eta = self.X.T @ (self.y - self.m * p)
            return float(ll) + self.binom_const, np.append(grad_eta, 0.0)
        u, curv = self._modes(fixed, tau2)
        sigma = 1.0 / np.sqrt(-curv)
        # v has one row per cluster, one column per node.
        v = u[:, None] + math.sqrt(2.0) * sigma[:, None] * self.nodes[None, :]
        eta_rows = fixed[:, None] + v[self.cid]
        row_ll = (self.y[:, None] * log_expit(eta_rows)
                  + (self.m - self.y)[:, None] * log_expit(-eta_rows))
        cluster_ll = np.zeros((self.n_clusters, len(self.nodes)))
        np.add.at(cluster_ll, self.cid, row_ll)
        log_g = (cluster_ll - v ** 2 / (2.0 * tau2)
                 - 0.5 * math.log(2.0 * math.pi * tau2))
        log_terms = self.log_weights[None, :] + log_g
        log_int = np.log(math.sqrt(2.0) * sigma) + _logsumexp(log_terms)
        ll = float(np.sum(log_int)) + self.binom_const

        post = np.exp(log_terms - _logsumexp(log_terms)[:, None])
        resid = self.y[:, None] - self.m[:, None] * expit(eta_rows)
        row_score = np.sum(post[self.cid] * resid, axis=1)
        grad_eta = self.X.T @ row_score
        grad_logtau = float(np.sum(post * (v * v / tau2 - 1.0)))
        return ll, np.append(grad_eta, grad_logtau)


def _logsumexp(a: np.ndarray) -> np.ndarray:
    peak = np.max(a, axis=-1, keepdims=True)
    return np.squeeze(peak, -1) + np.log(np.sum(np.exp(a - peak), axis=-1))


def _cluster_ids(census: Census, level: str) -> np.ndarray:
    arr = census.arrays
    if level == "village":
        return np.arange(len(arr.village_ids))
    if level == "health_zone":
        order = {a: i for i, a in enumerate(census.health_areas)}
        return np.array([order[a] for a in arr.area_ids])
    raise ConfigError(f"level must be one of {LEVELS}, got {level!r}")


def fit_random_intercept(census: Census, level: str = "village",
                         n_quad: int = DEFAULT_N_QUAD) -> GlmmFit:
    """Maximize the random-intercept marginal likelihood over (eta, log tau).

    A tau estimate collapsing onto the lower bound is reported as
    tau2 = 0 with the boundary flag, with eta refit at exactly tau = 0.
    """
    if n_quad < 9:
        raise ConfigError(f"n_quad must be >= 9, got {n_quad}")
    arr = census.arrays
    pop_std, _, _ = standardize_population(census)
    X = np.column_stack([np.ones(len(pop_std)), pop_std, arr.distance])
    y = arr.n_mcv1.astype(float)
    m = arr.n_children.astype(float)
    cid = _cluster_ids(census, level)
    marginal = _MarginalLoglik(X, y, m, cid, n_quad)

    start_fit = fit_binomial_glm(X, y, m)

    def objective(theta: np.ndarray) -> tuple[float, np.ndarray]:
        ll, grad = marginal.value_and_grad(theta[:3], math.exp(theta[3]) ** 2)
        return -ll, -grad

    return _maximize(objective, start_fit, X, y, m, marginal, level, n_quad)


def _projected_gradient(grad: np.ndarray, theta: np.ndarray) -> np.ndarray:
    pg = np.array(grad, dtype=float)
    if theta[3] <= _LOG_TAU_BOUNDS[0] + 1e-9 and pg[3] > 0:
        pg[3] = 0.0
    if theta[3] >= _LOG_TAU_BOUNDS[1] - 1e-9 and pg[3] < 0:
        pg[3] = 0.0
    return pg


def _polish_interior(objective, theta: np.ndarray,
                     max_iter: int = 25) -> tuple[np.ndarray, np.ndarray]:
    """Damped Newton cleanup after the quasi-Newton stage.

    L-BFGS-B can stop on a flat objective with the gradient still a
    touch above tolerance; a few Newton steps on the analytic gradient
    close the gap. The Hessian comes from central differences of the
    gradient, so each step costs eight gradient evaluations.
    """
    f, g = objective(theta)
    for _ in range(max_iter):
        pg = _projected_gradient(g, theta)
        if float(np.max(np.abs(pg))) < _GRAD_TOL:
            break
        free = [0, 1, 2, 3] if pg[3] != 0.0 or g[3] == pg[3] else [0, 1, 2]
        hess = np.zeros((4, 4))
        for j in range(4):
            h = 1e-5 * max(1.0, abs(theta[j]))
            tp = theta.copy()
            tp[j] += h
            tm = theta.copy()
            tm[j] -= h
            hess[:, j] = (objective(tp)[1] - objective(tm)[1]) / (2.0 * h)
        hess = 0.5 * (hess + hess.T)
        sub = hess[np.ix_(free, free)]
        try:
            delta = np.linalg.solve(sub, -g[free])
        except np.linalg.LinAlgError:
            break
        accepted = False
        scale = 1.0
        for _ in range(12):
            cand = theta.copy()
            cand[free] += scale * delta
            cand[3] = min(max(cand[3], _LOG_TAU_BOUNDS[0]), _LOG_TAU_BOUNDS[1])
            fc, gc = objective(cand)
            if fc <= f + 1e-12 * abs(f):
                theta, f, g = cand, fc, gc
                accepted = True
                break
            scale *= 0.5
        if not accepted:
            break
    return theta, _projected_gradient(g, theta)


def _maximize(objective, start_fit, X, y, m, marginal, level: str,
              n_quad: int) -> GlmmFit:
    theta0 = np.append(start_fit.beta, math.log(0.7))
    bounds = [(None, None)] * 3 + [_LOG_TAU_BOUNDS]
    res = minimize(objective, theta0, method="L-BFGS-B", jac=True,
                   bounds=bounds, options={"maxiter": 1000, "maxfun": 20000,
                                           "ftol": 1e-15, "gtol": 1e-7})
    theta, pg = _polish_interior(objective, np.array(res.x, dtype=float))
    eta = theta[:3]
    tau2 = math.exp(theta[3]) ** 2
    converged = bool(res.success) and float(np.max(np.abs(pg))) < _GRAD_TOL
    boundary = tau2 < _TAU2_FLOOR or theta[3] <= _LOG_TAU_BOUNDS[0] + 1e-9
    if boundary:
        # Variance hit the floor: report the exact tau = 0 model instead.
        refit = fit_binomial_glm(X, y, m)
        eta = refit.beta
        tau2 = 0.0
        loglik = refit.loglik
        converged = converged and refit.converged
    else:
        loglik = marginal(eta, tau2)
    return GlmmFit(level=level, eta=eta, tau2=tau2, icc=icc_from_tau2(tau2),
                   loglik=float(loglik), converged=converged, n_quad=n_quad,
                   boundary=boundary)
