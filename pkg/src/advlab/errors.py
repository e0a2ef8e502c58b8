"""Shared exception taxonomy.

Every error raised by the library derives from AdvlabError so callers (and
the CLI exit-code mapping) can catch one base class.
"""


class AdvlabError(Exception):
    """Base class for all library errors."""


class DimensionError(AdvlabError):
    """Shapes or extents are incompatible with an operation."""


class DomainError(AdvlabError):
    """A numeric input lies outside an operation's domain (e.g. log of <= 0)."""


class NumericError(AdvlabError):
    """A computation produced non-finite values where finite ones are required."""


class ContractError(AdvlabError):
    """A precondition or invariant of an operation was violated."""


class FormatError(AdvlabError):
    """A file or byte stream does not conform to its declared format."""


class ParseError(AdvlabError):
    """A textual input failed to parse; carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset
