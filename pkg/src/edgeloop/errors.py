"""Exception types raised across edgeloop."""


class EdgeloopError(Exception):
    """Base class for all library errors."""


class InvalidInputError(EdgeloopError, ValueError):
    """An argument violates an operation's precondition."""


class ParseError(EdgeloopError, ValueError):
    """A text file could not be parsed.  ``lineno`` is 1-based when known."""

    def __init__(self, message, lineno=None):
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
        self.lineno = lineno


class FormatError(EdgeloopError, ValueError):
    """A binary file has a bad header, bad length or failed checksum."""


class ModelFormatError(FormatError):
    """A serialized forest is corrupt or was written by an incompatible version."""


class TrainingError(EdgeloopError):
    """Forest training could not proceed with the given samples."""


class IngestionError(EdgeloopError):
    """A dataset directory could not be turned into usable frame pairs."""


class IterationError(EdgeloopError):
    """One pass of the learning loop did not gather enough supervision."""
