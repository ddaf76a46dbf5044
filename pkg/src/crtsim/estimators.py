"""Candidate follow-up analyses.

Three tests of the one-sided hypothesis that treatment raises the
village-level MCV1 rate: a naive Wald test on village proportions, a
quasi-binomial logistic regression, and a beta regression on
boundary-transformed proportions. Each regression uses the same
six-column design (intercept, arm, baseline rate, population, distance,
population x distance) and reports a Wald decision on the arm
coefficient at a configurable critical z.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy.special import digamma, expit, gammaln, polygamma

from .dgm import SimulatedVillage
from .errors import SingularDesignError

METHODS = ("naive", "quasibinomial", "beta")

N_DESIGN_COLS = 6
_IRLS_TOL = 1e-8
_IRLS_MAX_ITER = 50
_SEPARATION_LOGIT = 15.0
_BETA_SCORE_TOL = 1e-8
_BETA_MAX_ITER = 200
_LOG_PHI_CAP = 30.0


@dataclass(frozen=True)
class TestResult:
    method: str
    estimate: float
    se: float
    z: float
    reject: bool
    converged: bool

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")


def _decision(z: float, critical_z: float, converged: bool) -> bool:
    return bool(converged and z > critical_z)


@dataclass(frozen=True)
class AnalysisDataset:
    """Per-village follow-up outcomes with their adjustment covariates."""

    y1: np.ndarray
    m1: np.ndarray
    arm: np.ndarray
    baseline_rate: np.ndarray
    population: np.ndarray
    distance: np.ndarray

    def __post_init__(self):
        n = len(self.y1)
        for name in ("m1", "arm", "baseline_rate", "population", "distance"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"column {name} length differs from y1")
        if np.any(self.m1 < 1):
            raise ValueError("every village needs m1 >= 1")
        if np.any((self.arm != 0) & (self.arm != 1)):
            raise ValueError("arm indicator must be 0 or 1")
        if np.any((self.y1 < 0) | (self.y1 > self.m1)):
            raise ValueError("y1 must lie in [0, m1]")
        if np.sum(self.arm == 1) < 2 or np.sum(self.arm == 0) < 2:
            raise ValueError("each arm needs at least 2 villages")

    @classmethod
    def from_villages(cls, villages: Sequence[SimulatedVillage]) -> "AnalysisDataset":
        return cls(
            y1=np.array([v.y1 for v in villages], dtype=float),
            m1=np.array([v.m1 for v in villages], dtype=float),
            arm=np.array([1.0 if v.arm == "treatment" else 0.0 for v in villages]),
            baseline_rate=np.array([v.baseline_rate for v in villages]),
            population=np.array([v.population for v in villages]),
            distance=np.array([v.distance_km for v in villages]),
        )

    @cached_property
    def n_villages(self) -> int:
        return len(self.y1)

    @cached_property
    def proportions(self) -> np.ndarray:
        return self.y1 / self.m1

    @cached_property
    def design(self) -> np.ndarray:
        return np.column_stack([
            np.ones(self.n_villages), self.arm, self.baseline_rate,
            self.population, self.distance, self.population * self.distance,
        ])


# ---------------------------------------------------------------------------
# Naive Wald test
# ---------------------------------------------------------------------------

def naive_wald(data: AnalysisDataset, critical_z: float) -> TestResult:
    """Difference of mean village proportions with an unequal-variance SE."""
    p = data.proportions
    treated = data.arm == 1
    pt, pc = p[treated], p[~treated]
    estimate = float(np.mean(pt) - np.mean(pc))
    se = math.sqrt(np.var(pt, ddof=1) / len(pt) + np.var(pc, ddof=1) / len(pc))
    if se == 0.0:
        z = 0.0 if estimate == 0.0 else math.copysign(math.inf, estimate)
    else:
        z = estimate / se
    return TestResult(method="naive", estimate=estimate, se=se, z=z,
                      reject=_decision(z, critical_z, True), converged=True)


# ---------------------------------------------------------------------------
# Binomial GLM core (shared with the fixed-effects baseline fit)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BinomialGlmFit:
    beta: np.ndarray
    cov_unscaled: np.ndarray
    mu: np.ndarray
    loglik: float
    converged: bool
    n_iter: int


def fit_binomial_glm(X: np.ndarray, y: np.ndarray, m: np.ndarray) -> BinomialGlmFit:
    """Logit-link binomial MLE by iteratively reweighted least squares.

    y are successes out of m per row. Divergence past +-15 on any
    coefficient is treated as separation and flagged as nonconvergence.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    m = np.asarray(m, dtype=float)
    n, p = X.shape
    if np.linalg.matrix_rank(X) < p:
        raise SingularDesignError(f"design matrix has rank below {p}")
    prop = y / m
    mu = np.clip((y + 0.5) / (m + 1.0), 1e-10, 1.0 - 1e-10)
    eta = np.log(mu / (1.0 - mu))
    beta = np.zeros(p)
    converged = False
    it = 0
    for it in range(1, _IRLS_MAX_ITER + 1):
        var = mu * (1.0 - mu)
        w = m * var
        z = eta + (prop - mu) / var
        xtw = X.T * w
        try:
            beta_new = np.linalg.solve(xtw @ X, xtw @ z)
        except np.linalg.LinAlgError:
            raise SingularDesignError("weighted normal equations are singular") from None
        delta = np.max(np.abs(beta_new - beta))
        beta = beta_new
        eta = X @ beta
        mu = np.clip(expit(eta), 1e-10, 1.0 - 1e-10)
        if np.max(np.abs(beta)) > _SEPARATION_LOGIT:
            break
        if delta < _IRLS_TOL:
            converged = True
            break
    w = m * mu * (1.0 - mu)
    xtwx = (X.T * w) @ X
    try:
        cov_unscaled = np.linalg.inv(xtwx)
    except np.linalg.LinAlgError:
        raise SingularDesignError("information matrix is singular") from None
    loglik = float(np.sum(
        gammaln(m + 1) - gammaln(y + 1) - gammaln(m - y + 1)
        + y * np.log(mu) + (m - y) * np.log(1.0 - mu)
    ))
    return BinomialGlmFit(beta=beta, cov_unscaled=cov_unscaled, mu=mu,
                          loglik=loglik, converged=converged, n_iter=it)


def pearson_dispersion(fit: BinomialGlmFit, y: np.ndarray, m: np.ndarray,
                       n_params: int) -> float:
    """Pearson chi-square over residual degrees of freedom."""
    n = len(y)
    if n <= n_params:
        raise SingularDesignError(
            f"dispersion needs more rows ({n}) than parameters ({n_params})"
        )
    resid2 = (y - m * fit.mu) ** 2 / (m * fit.mu * (1.0 - fit.mu))
    return float(np.sum(resid2) / (n - n_params))


def fit_quasibinomial(data: AnalysisDataset, critical_z: float) -> TestResult:
    """Quasi-binomial logistic regression with binomial-denominator weights."""
    X = data.design
    fit = fit_binomial_glm(X, data.y1, data.m1)
    dispersion = pearson_dispersion(fit, data.y1, data.m1, X.shape[1])
    estimate = float(fit.beta[1])
    se = math.sqrt(max(dispersion, 0.0) * fit.cov_unscaled[1, 1])
    z = estimate / se if se > 0 else 0.0
    return TestResult(method="quasibinomial", estimate=estimate, se=se, z=z,
                      reject=_decision(z, critical_z, fit.converged),
                      converged=fit.converged)


# ---------------------------------------------------------------------------
# Beta regression (mean-precision parameterization)
# ---------------------------------------------------------------------------

def boundary_transform(r: float, n_obs: int) -> float:
    """Shrink a proportion off the closed boundary: (r(n-1) + 0.5)/n."""
    if n_obs < 1:
        raise ValueError(f"n_obs must be >= 1, got {n_obs}")
    return (r * (n_obs - 1) + 0.5) / n_obs


def _beta_loglik(theta: np.ndarray, X: np.ndarray, ystar: np.ndarray,
                 log_r: np.ndarray, log_1mr: np.ndarray) -> float:
    beta, gamma = theta[:-1], theta[-1]
    mu = expit(X @ beta)
    phi = math.exp(gamma)
    a = mu * phi
    b = (1.0 - mu) * phi
    return float(np.sum(
        gammaln(phi) - gammaln(a) - gammaln(b)
        + (a - 1.0) * log_r + (b - 1.0) * log_1mr
    ))


def beta_score(theta: np.ndarray, X: np.ndarray, ystar: np.ndarray,
               log_r: np.ndarray, log_1mr: np.ndarray) -> np.ndarray:
    """Analytic score of the beta log-likelihood in (beta, log phi)."""
    beta, gamma = theta[:-1], theta[-1]
    mu = expit(X @ beta)
    phi = math.exp(gamma)
    a = mu * phi
    b = (1.0 - mu) * phi
    mustar = digamma(a) - digamma(b)
    t = mu * (1.0 - mu)
    score_beta = phi * (X.T @ (t * (ystar - mustar)))
    score_phi = np.sum(mu * (ystar - mustar) + log_1mr - digamma(b) + digamma(phi))
    return np.append(score_beta, phi * score_phi)


def _beta_expected_info(theta: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Expected information in (beta, log phi) coordinates."""
    beta, gamma = theta[:-1], theta[-1]
    mu = expit(X @ beta)
    phi = math.exp(gamma)
    a = mu * phi
    b = (1.0 - mu) * phi
    psi1a = polygamma(1, a)
    psi1b = polygamma(1, b)
    t = mu * (1.0 - mu)
    p = X.shape[1]
    info = np.empty((p + 1, p + 1))
    info[:p, :p] = phi * phi * ((X.T * (t * t * (psi1a + psi1b))) @ X)
    c = phi * (psi1a * mu - psi1b * (1.0 - mu))
    cross = phi * (X.T @ (t * c))
    info[:p, p] = cross
    info[p, :p] = cross
    k_phiphi = np.sum(psi1a * mu ** 2 + psi1b * (1.0 - mu) ** 2) - len(mu) * polygamma(1, phi)
    info[p, p] = phi * phi * k_phiphi
    return info


@dataclass(frozen=True)
class BetaRegressionFit:
    beta: np.ndarray
    phi: float
    cov: np.ndarray | None
    loglik: float
    converged: bool
    n_iter: int
    score_norm: float


def fit_beta_mle(X: np.ndarray, r: np.ndarray) -> BetaRegressionFit:
    """Maximize the beta likelihood by Fisher scoring with step halving.

    Mean on the logit link over X, scalar precision on the log link.
    Standard errors come from the observed information, computed by
    central differences of the analytic score at the optimum.
    """
    X = np.asarray(X, dtype=float)
    r = np.asarray(r, dtype=float)
    if np.any((r <= 0.0) | (r >= 1.0)):
        raise RuntimeError("beta regression responses must lie strictly in (0,1)")
    n, p = X.shape
    if np.linalg.matrix_rank(X) < p:
        raise SingularDesignError(f"design matrix has rank below {p}")
    ystar = np.log(r / (1.0 - r))
    log_r = np.log(r)
    log_1mr = np.log(1.0 - r)
    args = (X, ystar, log_r, log_1mr)

    # Least-squares logit fit seeds the mean model and the precision.
    beta0, *_ = np.linalg.lstsq(X, ystar, rcond=None)
    resid = ystar - X @ beta0
    sigma2 = float(resid @ resid) / max(n - p, 1)
    mu0 = expit(X @ beta0)
    if sigma2 > 0:
        phi0 = max(float(np.mean(mu0 * (1.0 - mu0) / sigma2)) - 1.0, 1.0)
    else:
        phi0 = 100.0
    theta = np.append(beta0, math.log(phi0))

    ll = _beta_loglik(theta, *args)
    converged = False
    it = 0
    for it in range(1, _BETA_MAX_ITER + 1):
        score = beta_score(theta, *args)
        if np.max(np.abs(score)) < _BETA_SCORE_TOL:
            converged = True
            break
        info = _beta_expected_info(theta, X)
        info[np.diag_indices_from(info)] += 1e-10
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            break
        improved = False
        for _ in range(30):
            cand = theta + step
            cand[-1] = min(max(cand[-1], -_LOG_PHI_CAP), _LOG_PHI_CAP)
            ll_cand = _beta_loglik(cand, *args)
            if ll_cand > ll - 1e-12 and math.isfinite(ll_cand):
                theta, ll = cand, ll_cand
                improved = True
                break
            step = step / 2.0
        if not improved:
            break
    score = beta_score(theta, *args)
    score_norm = float(np.max(np.abs(score)))
    converged = converged or score_norm < _BETA_SCORE_TOL

    cov = None
    if converged:
        obs_info = -_score_jacobian(theta, args)
        obs_info = 0.5 * (obs_info + obs_info.T)
        try:
            cov = np.linalg.inv(obs_info)
            if np.any(np.diag(cov) <= 0):
                cov = None
                converged = False
        except np.linalg.LinAlgError:
            cov = None
            converged = False
    return BetaRegressionFit(beta=theta[:-1], phi=math.exp(theta[-1]), cov=cov,
                             loglik=ll, converged=converged, n_iter=it,
                             score_norm=score_norm)


def _score_jacobian(theta: np.ndarray, args: tuple) -> np.ndarray:
    d = len(theta)
    jac = np.empty((d, d))
    for j in range(d):
        h = 1e-5 * max(1.0, abs(theta[j]))
        hi = theta.copy()
        lo = theta.copy()
        hi[j] += h
        lo[j] -= h
        jac[:, j] = (beta_score(hi, *args) - beta_score(lo, *args)) / (2.0 * h)
    return jac


def fit_beta_regression(data: AnalysisDataset, critical_z: float) -> TestResult:
    """Beta regression on boundary-transformed village proportions."""
    n = data.n_villages
    r = (data.proportions * (n - 1) + 0.5) / n
    fit = fit_beta_mle(data.design, r)
    estimate = float(fit.beta[1])
    if fit.cov is not None:
        se = math.sqrt(fit.cov[1, 1])
        z = estimate / se
    else:
        se = math.nan
        z = math.nan
    reject = _decision(z, critical_z, fit.converged) if math.isfinite(z) else False
    return TestResult(method="beta", estimate=estimate, se=se, z=z,
                      reject=reject, converged=fit.converged)
