"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class LidarSemError(Exception):
    exit_code = 2


class ConfigError(LidarSemError, ValueError):
    exit_code = 1


class DataError(LidarSemError, ValueError):
    exit_code = 2


class FormatError(DataError):
    """A file does not match its declared binary or text layout."""


class NumericalError(LidarSemError, ArithmeticError):
    exit_code = 3
