"""Exception hierarchy shared by every module.

The CLI maps these onto its exit codes, so new failure modes should subclass
one of them rather than raising bare builtins.
"""


class AvgRLError(Exception):
    """Base class for all package errors."""


class StructuralError(AvgRLError, ValueError):
    """Malformed input: wrong shapes, bad files, inconsistent lengths."""


class DomainError(AvgRLError, ValueError):
    """Well-formed input outside an operation's mathematical domain."""


class PreconditionError(DomainError):
    """An algorithm's standing assumption does not hold for the given MDP."""


class ConvergenceError(AvgRLError, ArithmeticError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class NumericalError(AvgRLError, ArithmeticError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
