"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: config/usage/dimension/checkpoint problems
exit with 2, numerical failures with 3.
"""


class AgmtError(Exception):
    pass


class DimensionError(AgmtError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(AgmtError, ValueError):
    """Input lies outside the domain of an operation (e.g. log of a non-positive)."""


class UsageError(AgmtError, ValueError):
    pass


class ConfigError(AgmtError, ValueError):
    pass


class NumericError(AgmtError, ArithmeticError):
    """A non-finite or degenerate value was produced."""


class ParseError(AgmtError, ValueError):
    pass


class CheckpointError(AgmtError):
    pass


class FileError(AgmtError, OSError):
    """Reading or writing an artifact file failed."""
