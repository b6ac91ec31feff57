"""Exception types shared across the package.

The CLI maps each class to an exit status (validation 1, I/O 2, numeric 3).
"""


class ValidationError(ValueError):
    """Input violates an operation's preconditions."""


class FormatError(OSError):
    """A persisted artifact (checkpoint, descriptor database) is corrupt or of an unknown version."""


class NumericError(ArithmeticError):
    """Training produced a non-finite value."""
