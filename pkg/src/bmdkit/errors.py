"""Exception types shared across the package."""


class BmdkitError(Exception):
    """Base class for all benchmark-dose analysis errors."""


class InvalidArgument(BmdkitError, ValueError):
    """An argument violates a documented precondition."""


class DegenerateKnots(BmdkitError):
    """Sample values cannot support the requested knot layout."""


class OutOfSupport(BmdkitError):
    """Evaluation point lies outside the knot range."""


class NoDerivative(BmdkitError):
    """Derivative requested for an order-1 basis."""


class UnsupportedOrder(BmdkitError):
    """Operation is only implemented for cubic splines."""


class InnerOptFailed(BmdkitError):
    """Newton iteration over the regression coefficients did not converge."""


class FitFailed(BmdkitError):
    """Outer marginal-likelihood ascent did not converge."""


class BmdNotEstimable(BmdkitError):
    """No benchmark dose exists inside the search interval."""


class DegenerateSlope(BmdkitError):
    """The estimating equation has numerically zero slope at the root."""


class BmdlNotEstimable(BmdkitError):
    """No bootstrap sample produced an estimable benchmark dose."""


class NoTrueBmd(BmdkitError):
    """The closed-form true benchmark dose does not exist."""


class ConfigError(BmdkitError):
    """Simulation or analysis configuration is invalid."""


class DataFormatError(BmdkitError):
    """Input table is unreadable, has missing columns, or non-numeric cells."""
