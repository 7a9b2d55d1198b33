"""Exception hierarchy.

Errors are grouped so the command line front end can map them to exit codes:
configuration problems (:class:`InvalidParams` and friends) exit with 2,
numerical failures (:class:`NumericalError` subclasses) exit with 3.
"""


class VolterraError(Exception):
    """Base class for all package errors."""


class InvalidParams(VolterraError, ValueError):
    """Parameters leave the admissible region."""


class GridMismatch(InvalidParams):
    """Requested times are not nodes of the grid."""


class InvalidOrder(InvalidParams):
    """Perturbation order not above the kernel growth bound."""


class OutOfRegion(InvalidParams):
    """Arguments outside the convergence region of an integral."""


class NotCompletelyMonotone(InvalidParams):
    """Kernel has no Bernstein representation."""


class NoLimitAtInfinity(InvalidParams):
    """Kernel has no finite limit at infinity."""


class MissingHistory(InvalidParams):
    """Ensemble was simulated without retained noise and coefficients."""


class TooFewPaths(InvalidParams):
    """Not enough samples for the requested statistic."""


class EmptyBin(InvalidParams):
    """Too few samples per bin."""


class NumericalError(VolterraError, ArithmeticError):
    """Base class for numerical failures."""


class EvalAtSingularity(NumericalError):
    """Kernel evaluated at a singular point."""


class SingularEvaluation(EvalAtSingularity):
    """Shifted kernel weight hits a singular node."""


class QuadratureFailure(NumericalError):
    """Quadrature did not reach the requested tolerance."""


class DivergentIntegral(QuadratureFailure):
    """Integral estimate does not converge."""


class SingularSystem(NumericalError):
    """Triangular system with a vanishing pivot."""


class InconsistentRoutes(NumericalError):
    """Two independent computations of one quantity disagree."""


class BoundViolation(NumericalError):
    """A theoretical inequality fails beyond discretization slack."""


class DegenerateSystem(NumericalError):
    """Gram matrix is numerically rank deficient."""


class IllConditioned(NumericalError):
    """Linear system too ill-conditioned to solve reliably."""


class NumericalBlowup(NumericalError):
    """Simulated paths exceeded the configured bound."""
