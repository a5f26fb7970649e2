"""Exception types shared across the toolkit.

The CLI maps ``DatkitError`` subclasses to exit code 1 (bad inputs or
configuration) except ``NumericError``, which signals a runtime failure
and maps to exit code 2.
"""


class DatkitError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(DatkitError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(DatkitError):
    """A call violated an operation precondition."""


class GraphStateError(DatkitError):
    """Graph used out of order, e.g. backward before forward."""


class ConfigError(DatkitError):
    """Invalid configuration value."""


class ParseError(DatkitError):
    """Malformed input text; carries a line number where known."""


class ValidationError(DatkitError):
    """Well-formed input with invalid content."""


class FormatError(DatkitError):
    """Binary or structured file does not match its declared format."""


class RangeError(DatkitError):
    """A requested span lies outside the addressable data."""


class NumericError(DatkitError):
    """A computation produced or received non-finite values."""


class StratumError(DatkitError):
    """An evaluation stratum is empty or degenerate."""
