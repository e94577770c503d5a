"""Exception types raised by micromix."""


class MxError(Exception):
    """Base class for all micromix errors."""


class FormatError(MxError, ValueError):
    """Unknown or unsupported element format."""


class InvalidScaleError(MxError, ValueError):
    """An E8M0 scale byte that does not encode a finite power of two."""


class ShapeError(MxError, ValueError):
    """Tensor shape does not satisfy an operation's contract."""


class PlanMismatchError(MxError, ValueError):
    """Plan, activation and weight do not belong together."""


class DomainError(MxError, ValueError):
    """Argument outside the mathematical domain of a formula."""


class ParseError(MxError):
    """Malformed binary or JSON file."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
