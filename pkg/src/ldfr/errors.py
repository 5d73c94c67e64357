"""Exception hierarchy shared by all modules."""


class LdfrError(Exception):
    """Base class for every error raised by this package."""


class SpecError(LdfrError, ValueError):
    """Invalid basis, penalty or model specification."""


class DomainError(LdfrError, ValueError):
    """Evaluation point outside the declared domain."""


class DimensionError(LdfrError, ValueError):
    """Array shapes that do not agree."""


class DataError(LdfrError, ValueError):
    """Input data that cannot support the requested computation."""


class NumericalRankError(LdfrError, ArithmeticError):
    """Linear system that is singular at the requested tuning."""


class DegenerateCovarianceError(LdfrError, ArithmeticError):
    """Covariance surface without any positive eigenvalue."""


class CovarianceInestimableError(DataError):
    """Too few distinct time pairs to estimate a score covariance."""


class ConvergenceError(LdfrError, RuntimeError):
    """Iterative fit stopped before meeting its tolerance.

    Parameters
    ----------
    message : str
        Human readable reason.
    last_iterate : object, optional
        Whatever the algorithm held when it gave up (usually a parameter
        vector or a partially converged fit).
    """

    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


class UnsupportedLinkError(LdfrError, ValueError):
    """Operation not defined for the model's link function."""


class UnknownSubjectError(LdfrError, KeyError):
    """Unknown subject identifier."""


class MetricError(LdfrError, ValueError):
    """Metric requested on empty or misaligned inputs."""


class ConfigurationError(LdfrError, ValueError):
    """Run or scenario configuration that cannot be honoured."""


class SchemaError(LdfrError, ValueError):
    """Input file contents that violate the documented schema."""


class ContainerError(LdfrError, IOError):
    """Corrupt or truncated fit bundle."""


class BundleVersionError(ContainerError):
    """Fit bundle written by an incompatible format version."""


class InputError(LdfrError, IOError):
    """Required input file missing or unreadable."""
