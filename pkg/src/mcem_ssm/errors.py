"""Exception types shared across the package.

Each maps onto a CLI exit code (see :mod:`mcem_ssm.cli`).
"""


class MCEMError(Exception):
    """Base class for package errors."""

    exit_code = 1


class ConfigError(MCEMError, ValueError):
    exit_code = 2


class DataError(MCEMError, ValueError):
    exit_code = 3


class NumericalError(MCEMError, ArithmeticError):
    exit_code = 4
