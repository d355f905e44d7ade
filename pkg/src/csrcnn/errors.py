"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array shapes are inconsistent with an operation's contract."""


class ConfigError(ValueError):
    """Invalid configuration or parameter values."""


class FormatError(ValueError):
    """A checkpoint or manifest file could not be parsed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
