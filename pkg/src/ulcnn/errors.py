"""Exception families. Each family maps to a distinct CLI exit code."""


class UlcnnError(Exception):
    exit_code = 1


class ConfigError(UlcnnError, ValueError):
    exit_code = 2


class FormatError(UlcnnError, ValueError):
    """Malformed, truncated or mismatched data/weight files."""

    exit_code = 3


class ShapeError(UlcnnError, ValueError):
    exit_code = 3

    def __init__(self, message, axis=None):
        super().__init__(message)
        self.axis = axis


class NumericError(UlcnnError, ArithmeticError):
    exit_code = 4


IO_EXIT_CODE = 5
