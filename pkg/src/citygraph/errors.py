"""Exception hierarchy.

Every error maps to a CLI exit code: config problems exit 2, bad input data
exits 3 and numerical failures exit 4.
"""


class CityGraphError(Exception):
    exit_code = 1


class ConfigError(CityGraphError, ValueError):
    exit_code = 2


class DataError(CityGraphError, ValueError):
    exit_code = 3


class NumericError(CityGraphError, ArithmeticError):
    exit_code = 4


class InvalidCoordinate(DataError):
    pass


class InvalidGeometry(DataError):
    pass


class UndefinedBearing(DataError):
    pass


class UnknownNode(DataError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class ParseError(DataError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset


class FormatVersionError(ParseError):
    pass


class ShapeError(NumericError):
    pass
