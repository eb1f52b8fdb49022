"""Exception hierarchy.

Validation problems derive from ``ValueError`` and numerical failures from
``ArithmeticError`` so callers can catch either the package type or the
builtin family.
"""


class WadcError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(WadcError, ValueError):
    """Bad input: dimensions, domains, missing channels, malformed files."""


class NumericalError(WadcError, ArithmeticError):
    """A computation could not produce a trustworthy result."""


class IllConditionedError(NumericalError):
    pass


class RankDeficientError(NumericalError):
    def __init__(self, message, singular_values=None):
        super().__init__(message)
        self.singular_values = singular_values


class UnsupportedMultiplicityError(NumericalError):
    pass


class ConvergenceError(NumericalError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class StageError(WadcError):
    """Wraps a failure inside one pipeline stage."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
