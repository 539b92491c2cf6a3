"""Exception types shared across the package."""


class OtgeoError(Exception):
    """Base class for all package-specific errors."""


class FormatError(OtgeoError, ValueError):
    """A file did not parse under its declared format.

    Carries enough context (path plus line or byte offset) to locate the
    problem in the input file.
    """

    def __init__(self, message, path=None, line=None, offset=None):
        loc = ""
        if path is not None:
            loc += f" in {path}"
        if line is not None:
            loc += f" at line {line}"
        if offset is not None:
            loc += f" at byte offset {offset}"
        super().__init__(message + loc)
        self.path = path
        self.line = line
        self.offset = offset


class InvalidInputError(OtgeoError, ValueError):
    """Caller passed data that violates an operation's preconditions."""


class InvalidConfigError(OtgeoError, ValueError):
    """A configuration value or key is out of contract."""


class NumericError(OtgeoError, ArithmeticError):
    """A computation produced non-finite or otherwise unusable numbers."""


class DegenerateRowError(NumericError):
    """A transport-plan row has zero marginal mass and cannot be normalized."""


class SizeError(OtgeoError, ValueError):
    """An instance exceeds the documented desk-scale size cap."""
