"""Simulation-based planning for covariate-constrained cluster randomized trials."""

from .census import (Census, DEFAULT_PROFILES, HealthAreaProfile, Village,
                     empirical_logit, generate_synthetic_census, load_census,
                     summarize_census, write_census)
from .closed_form import (PowerInputs, cluster_size, power, power_plateau_limit)
from .dgm import (CalibratedIntercepts, CoefficientSet, Scenario,
                  calibrate_intercepts, coefficient_set, simulate_followup,
                  tau2_from_icc)
from .engine import (StudyConfig, compare_report, expand_grid, load_study_config,
                     mcse, run_scenario, run_study, scenario_id)
from .errors import (CalibrationError, CapacityError, CensusSchemaError,
                     ConfigError, CrtsimError, EmptyPoolError, GenerationError,
                     InputError, RunFailure, SingularDesignError)
from .estimators import (AnalysisDataset, TestResult, boundary_transform,
                         fit_beta_regression, fit_quasibinomial, naive_wald)
from .glmm_icc import (GlmmFit, fit_fixed_logistic, fit_random_intercept,
                       icc_from_tau2, standardize_population)
from .randomization import (Allocation, ConstrainedPool, RandomizationDraw,
                            apportion_villages, build_pool, draw_candidate,
                            sample_from_pool, smd)

__version__ = "0.1.0"

__all__ = [
    "AnalysisDataset", "Allocation", "CalibratedIntercepts", "CalibrationError",
    "CapacityError", "Census", "CensusSchemaError", "CoefficientSet",
    "ConfigError", "ConstrainedPool", "CrtsimError", "DEFAULT_PROFILES",
    "EmptyPoolError", "GenerationError", "GlmmFit", "HealthAreaProfile",
    "InputError", "PowerInputs", "RandomizationDraw", "RunFailure", "Scenario",
    "SingularDesignError", "StudyConfig", "TestResult", "Village",
    "apportion_villages", "boundary_transform", "build_pool",
    "calibrate_intercepts", "cluster_size", "coefficient_set", "compare_report",
    "draw_candidate", "empirical_logit", "expand_grid", "fit_beta_regression",
    "fit_fixed_logistic", "fit_quasibinomial", "fit_random_intercept",
    "generate_synthetic_census", "icc_from_tau2", "load_census",
    "load_study_config", "mcse", "naive_wald", "power", "power_plateau_limit",
    "run_scenario", "run_study", "sample_from_pool", "scenario_id", "smd",
    "standardize_population", "summarize_census", "tau2_from_icc",
    "write_census",
]
