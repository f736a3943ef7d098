"""Exception hierarchy; each maps onto a CLI exit code."""


class CompsegError(Exception):
    exit_code = 1


class ConfigError(CompsegError, ValueError):
    exit_code = 1


class DataError(CompsegError, ValueError):
    exit_code = 2


class DimensionError(DataError):
    pass


class NumericError(CompsegError, ArithmeticError):
    exit_code = 3


class UndefinedMetricError(NumericError):
    pass
