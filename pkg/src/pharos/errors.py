"""Exception hierarchy shared by every pharos module."""


class PharosError(Exception):
    """Base class for all toolkit errors."""


class InvalidInputError(PharosError, ValueError):
    pass


class DimensionError(PharosError, ValueError):
    pass


class ConfigError(PharosError, ValueError):
    pass


class GuardError(PharosError, ValueError):
    """Raised when an exhaustive routine is asked to work past its size guard."""


class FormatError(PharosError):
    """Malformed or truncated artifact file.

    ``offset`` is the byte position at which parsing failed.
    """

    def __init__(self, message: str, offset: int | None = None, path=None):
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


class NumericalError(PharosError, ArithmeticError):
    """Non-finite values appeared during training or attack."""
