"""Exception types shared across the package."""


class RelayPollError(Exception):
    """Base class for all package errors."""


class InstabilityError(RelayPollError, ValueError):
    """System traffic rho_s >= 1: queues grow without bound."""


class EmptyRegionError(RelayPollError, ValueError):
    """A pair has no location meeting the connectivity threshold (pair unserviceable)."""


class DegenerateDesignError(RelayPollError, ValueError):
    """Path-loss design matrix is rank deficient."""


class SingularCovarianceError(RelayPollError, ArithmeticError):
    """GP covariance matrix could not be factorized."""

    def __init__(self, message, condition_number=None, min_eigenvalue=None):
        super().__init__(message)
        self.condition_number = condition_number
        self.min_eigenvalue = min_eigenvalue


class GeometryError(RelayPollError, ValueError):
    """Invalid or degenerate geometric input."""


class ConvergenceError(RelayPollError, RuntimeError):
    """An iterative solver hit its iteration cap before certifying its tolerance.

    ``incumbent`` carries the best feasible result found so far.
    """

    def __init__(self, message, incumbent=None):
        super().__init__(message)
        self.incumbent = incumbent


class SearchLimitError(RelayPollError, RuntimeError):
    """Branch-and-bound exceeded its node budget."""
