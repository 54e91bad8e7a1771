"""Exception hierarchy.

Each family maps onto one CLI exit code (see ``gridpeft.cli``).
"""


class GridPeftError(Exception):
    exit_code = 1


class ConfigError(GridPeftError, ValueError):
    """Bad configuration: unknown keys, indivisible grids, unknown policies."""

    exit_code = 2


class DimensionError(ConfigError):
    """Operand shapes do not agree."""


class RankError(DimensionError):
    pass


class ContractError(GridPeftError, ValueError):
    """A precondition of an operation was violated by the caller."""

    exit_code = 2


class FormatError(GridPeftError, OSError):
    """Corrupt or mismatched on-disk data."""

    exit_code = 3

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(GridPeftError, ArithmeticError):
    """Non-finite values or failed numerical procedures."""

    exit_code = 4


class DomainError(NumericError, ValueError):
    """Argument outside the mathematical domain of a function."""


class UndefinedValueError(NumericError):
    """The requested quantity is undefined for the given inputs (e.g. 0/0)."""
