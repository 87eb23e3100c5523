"""Exception types shared across the package.

Every error carries an ``exit_code`` used by the command line front end:
2 usage, 3 input error, 4 numerical failure.
"""


class VolcapError(Exception):
    exit_code = 3


class InvalidArgumentError(VolcapError, ValueError):
    """Dimension mismatch, bad index or otherwise malformed argument."""


class ParseError(VolcapError):
    """A file could not be parsed. ``location`` names the file/line/field."""

    def __init__(self, message, location=None):
        self.location = location
        if location:
            message = f"{location}: {message}"
        super().__init__(message)


class IncompatibleVersionError(ParseError):
    pass


class MissingInputError(VolcapError):
    pass


class DegenerateGeometryError(VolcapError):
    """Point configuration does not determine a similarity transform."""


class NoSliceError(VolcapError):
    pass


class InitializationError(VolcapError):
    exit_code = 4


class NumericalError(VolcapError):
    exit_code = 4
