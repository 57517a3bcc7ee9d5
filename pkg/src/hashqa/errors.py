"""Exception hierarchy shared by all hashqa modules."""


class HashQAError(Exception):
    """Base class for every error raised by this package."""


class InputError(HashQAError, ValueError):
    """Bad user-supplied data (empty corpus, empty split, duplicate id)."""


class ParseError(InputError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class UsageError(HashQAError, ValueError):
    """An API was called with inconsistent shapes or state."""


class FormatError(HashQAError, ValueError):
    """A binary file or payload does not match its declared layout."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(HashQAError, ArithmeticError):
    """Non-finite values reached a computation that requires finite input."""


class CapacityError(HashQAError, MemoryError):
    """A requested representation would exceed the configured memory budget."""
