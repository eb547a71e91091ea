"""Exception hierarchy shared by all wellcast modules.

The CLI maps each family onto an exit code, so library code should raise the
most specific class that applies.
"""


class WellcastError(Exception):
    """Base class for every error raised deliberately by wellcast."""

    exit_code = 1


class ContractError(WellcastError, ValueError):
    """A caller violated a documented precondition."""

    exit_code = 2


class ShapeError(ContractError):
    """Operand dimensions do not conform."""


class ConfigError(ContractError):
    """An experiment configuration is invalid."""


class UnsupportedArchitectureError(ContractError):
    """The requested procedure is not defined for this architecture."""


class DataError(WellcastError):
    """Input data is unusable (empty, duplicated, too sparse...)."""

    exit_code = 3


class SchemaError(DataError):
    """A required column is missing from an input file."""


class NumericError(WellcastError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""

    exit_code = 4
