"""Exception hierarchy shared by every module."""


class FlipClassError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(FlipClassError, ValueError):
    """Operands have incompatible shapes."""


class DomainError(FlipClassError, ValueError):
    """An argument lies outside the domain of the operation."""


class NumericError(FlipClassError, ArithmeticError):
    """A computation produced a non-finite or degenerate value."""


class SizeError(FlipClassError, ValueError):
    """A problem is too large for an exhaustive routine."""


class ConfigError(FlipClassError, ValueError):
    """A configuration file or override is malformed."""

    def __init__(self, message, line=None, key=None):
        super().__init__(message)
        self.line = line
        self.key = key
