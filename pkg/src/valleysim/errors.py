"""Exception and warning types shared across the package."""


class ValleysimError(Exception):
    """Base class for all package errors."""


class ParameterError(ValleysimError, ValueError):
    """A scalar argument is out of its documented range."""


class ConfigurationError(ValleysimError, ValueError):
    """Inconsistent objects: length mismatches, bad enum values, bad files."""


class UnsupportedSchemeError(ConfigurationError):
    """Scheme/coefficient combination that the stepper does not support."""


class CouplingError(ConfigurationError):
    """Coupled equations disagree on grid, dt, or noise slice."""


class AbortedRunError(ValleysimError):
    """A trajectory produced a non-finite field; carries the last valid time."""

    def __init__(self, message: str, last_valid_time: float):
        super().__init__(message)
        self.last_valid_time = last_valid_time


class UndefinedStatisticError(ValleysimError, ValueError):
    """Statistic undefined for the given input (e.g. ratio of zero mass)."""


class AggregationError(ValleysimError, ValueError):
    """Replica outputs cannot be aggregated (e.g. mismatched time grids)."""


class SolverError(ValleysimError):
    """Numerical solver failed to converge under refinement."""


class PowerWarning(UserWarning):
    """Replica count too small for the statistical check to have power."""


class HeavyTailWarning(UserWarning):
    """Sample kurtosis is large; normal-approximation CI quality degrades."""
