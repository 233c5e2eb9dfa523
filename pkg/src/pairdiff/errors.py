"""Exception hierarchy shared by every module.

The CLI maps each class onto a distinct exit code, so raise the most
specific one that applies.
"""


class PairdiffError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ContractError(PairdiffError, ValueError):
    """A caller broke an operation's precondition (shapes, ranges, order)."""

    exit_code = 2


class ConfigError(PairdiffError, ValueError):
    """Invalid or inconsistent configuration."""

    exit_code = 3


class NumericError(PairdiffError, ArithmeticError):
    """Non-finite values appeared where finite ones are required."""

    exit_code = 4


class FormatError(PairdiffError, OSError):
    """A file on disk is missing, truncated or malformed."""

    exit_code = 5


class UsageError(PairdiffError):
    """Bad command line or config file."""

    exit_code = 2
