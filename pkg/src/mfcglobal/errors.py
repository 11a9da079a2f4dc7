"""Exception hierarchy shared by all modules."""


class MFCError(Exception):
    """Base class for every error raised by this package."""


class DomainError(MFCError, ValueError):
    """An argument lies outside the domain of the operation."""


class GraphError(MFCError):
    """Misuse of the autodiff tape (foreign or missing variables)."""


class DimensionError(MFCError, ValueError):
    """Array shapes do not match the declared dimensions."""


class NumericError(MFCError, ArithmeticError):
    """A computation produced non-finite values."""


class Diverged(NumericError):
    """Training cost blew up relative to its starting value."""


class CapacityError(MFCError):
    """A generator was asked for more points than it can produce."""


class DegenerateError(MFCError, ZeroDivisionError):
    """A closed-form expression has a vanishing denominator."""


class FormatError(MFCError, ValueError):
    """A serialized artifact is malformed."""


class ConfigError(MFCError, ValueError):
    """An experiment configuration is invalid or incomplete."""
