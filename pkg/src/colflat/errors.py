"""Exception types raised by colflat."""


class ColflatError(Exception):
    """Base class for all library errors."""


class ParameterError(ColflatError, ValueError):
    """An argument is outside its documented range or has the wrong shape."""


class DomainError(ParameterError):
    """A closed-form bound was evaluated outside the domain of its logarithm."""


class SingularityError(ColflatError, ArithmeticError):
    """A restricted Gram matrix is not invertible."""

    def __init__(self, message, smallest_eigenvalue=None):
        super().__init__(message)
        self.smallest_eigenvalue = smallest_eigenvalue


class ConditionViolatedError(ColflatError, ValueError):
    """A constant could not be derived because its defining inequality fails."""


class NoConvergenceError(ColflatError, RuntimeError):
    """An iterative solver stopped without meeting its tolerances."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})
