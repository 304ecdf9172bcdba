"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration/data problems exit 1,
numeric and verification failures exit 2.
"""


class SanPeftError(Exception):
    exit_code = 1


class ConfigError(SanPeftError, ValueError):
    pass


class DimensionError(SanPeftError, ValueError):
    pass


class DomainError(SanPeftError, ValueError):
    pass


class ContractError(SanPeftError, RuntimeError):
    pass


class FormatError(SanPeftError, ValueError):
    pass


class DataError(SanPeftError, ValueError):
    pass


class NumericError(SanPeftError, ArithmeticError):
    exit_code = 2


class VerificationError(SanPeftError, AssertionError):
    exit_code = 2
