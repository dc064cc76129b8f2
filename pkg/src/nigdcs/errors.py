"""Exception hierarchy shared across the package."""


class NigDcsError(Exception):
    """Base class for all package errors."""


class DomainError(NigDcsError, ValueError):
    """An argument lies outside the domain of the function."""


class ContractError(NigDcsError, ValueError):
    """A precondition linking several arguments does not hold."""


class DataError(NigDcsError, ValueError):
    """Input data is malformed, misaligned or too short."""


class NumericError(NigDcsError, ArithmeticError):
    """A numerical routine failed (bracketing, overflow, singular design)."""


class EstimationError(NumericError):
    """Maximum likelihood did not converge.

    The best parameters found so far are kept on ``best`` so callers can
    inspect or reuse them.
    """

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best
