"""Exception types shared across the package.

Each class maps to one CLI exit code (see ``cwcrf.cli``).
"""


class CwcrfError(Exception):
    """Base class for all package errors."""


class ArgumentError(CwcrfError, ValueError):
    """Bad argument or precondition violation (exit code 2)."""


class FormatError(CwcrfError):
    """Malformed file contents (exit code 3)."""

    def __init__(self, message, offset=None, path=None):
        self.offset = offset
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class UnsupportedFormatError(FormatError):
    """Well-formed file in a variant this package does not read."""


class ValidationError(CwcrfError, ValueError):
    """Array content violates a domain invariant (exit code 3)."""

    def __init__(self, message, pixel=None):
        self.pixel = pixel
        super().__init__(message)


class BudgetExceededError(CwcrfError):
    """Problem size exceeds an exact/enumerative backend's budget (exit code 4)."""
