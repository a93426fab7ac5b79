"""Exception hierarchy.

The CLI maps each family to an exit code, so every error raised by the
library belongs to exactly one of them.
"""


class SpikeAlignError(Exception):
    exit_code = 1


class ConfigError(SpikeAlignError, ValueError):
    exit_code = 2


class DimensionError(ConfigError):
    """Shapes of operands do not fit together."""


class ContractError(ConfigError):
    """A caller broke an operation's precondition."""


class DataError(SpikeAlignError):
    exit_code = 3


class FormatError(DataError):
    """A binary file is malformed, truncated or inconsistent."""


class NumericError(SpikeAlignError, ArithmeticError):
    exit_code = 4


class DomainError(NumericError):
    """Argument outside the mathematical domain of an operation."""
