"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4.
"""


class CtxmaskError(Exception):
    """Base class for all package errors."""


class ShapeError(CtxmaskError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(CtxmaskError, ValueError):
    """A model spec, experiment config, or argument combination is invalid."""


class DataError(CtxmaskError, ValueError):
    """A dataset file or record violates the expected format or invariants."""


class NumericError(CtxmaskError, ArithmeticError):
    """A numeric routine failed (failed decomposition, non-finite loss, ...)."""
