"""Exception types shared across the package.

The CLI maps them onto exit codes: usage 1, I/O 2, format 3.
"""


class GnndError(Exception):
    """Base class for all package errors."""


class UsageError(GnndError, ValueError):
    """Invalid parameters or incompatible inputs."""


class DomainError(GnndError, ValueError):
    """Input outside a metric's valid domain."""


class FormatError(GnndError, ValueError):
    """Malformed vector, graph or manifest file."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
