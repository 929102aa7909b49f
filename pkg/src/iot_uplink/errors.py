"""Exception hierarchy shared by the analytical and simulation layers."""


class ModelError(Exception):
    """Base class for every error raised by this package."""


class DomainError(ModelError, ValueError):
    """An argument lies outside the domain of the operation."""


class ConditioningError(ModelError, ArithmeticError):
    """A computation lost too much precision to be trusted."""


class ConvergenceError(ModelError, RuntimeError):
    """An iterative procedure did not converge within its budget."""


class TruncationError(ModelError, RuntimeError):
    """A truncated series or distribution did not reach its mass target."""


class DegenerateRealizationError(ModelError, RuntimeError):
    """A sampled network cannot support unbiased statistics."""
