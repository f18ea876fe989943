"""Exception hierarchy shared by every module."""


class AesError(Exception):
    """Base class for all errors raised by aespipe."""


class ShapeError(AesError, ValueError):
    pass


class NumericError(AesError, ArithmeticError):
    pass


class ConfigError(AesError, ValueError):
    pass


class DataError(AesError, ValueError):
    pass


class FormatError(AesError, ValueError):
    """A file does not follow its declared layout."""


class ParseError(FormatError):
    """A text file has a malformed line/row; ``location`` is 1-based."""

    def __init__(self, message, location=None):
        super().__init__(message)
        self.location = location


class FitError(AesError, ValueError):
    pass
