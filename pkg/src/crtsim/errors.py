"""Exception hierarchy shared by all crtsim modules.

Two base classes drive the CLI exit-code convention: ``InputError``
(bad user input, exit 1) and ``RunFailure`` (a computation that could
not complete, exit 2).
"""


class CrtsimError(Exception):
    """Base class for all crtsim errors."""


class InputError(CrtsimError):
    """Invalid user-supplied input (files, flags, config). CLI exit 1."""


class RunFailure(CrtsimError):
    """A computation failed at runtime (infeasible constraint, no
    convergence where one is required). CLI exit 2."""


class CensusSchemaError(InputError):
    """Census CSV or profile JSON violates the documented schema."""


class ConfigError(InputError):
    """Study config file is malformed; message carries the field path."""


class GenerationError(RunFailure):
    """Synthetic census generation cannot satisfy a profile's constraints."""


class CapacityError(RunFailure):
    """An arm does not contain enough villages for the requested selection."""


class EmptyPoolError(RunFailure):
    """No randomization attempt satisfied the balance threshold."""


class CalibrationError(RunFailure):
    """Intercept calibration target unreachable inside the search bracket."""


class SingularDesignError(RunFailure):
    """Regression design matrix is rank deficient."""
