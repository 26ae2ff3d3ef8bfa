"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array dimensions do not chain or match."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


class UndefinedMetricError(ValueError):
    """A metric is undefined for the given inputs (empty side, zero variance, ...)."""


class FormatError(ValueError):
    """A binary file does not follow the expected layout."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(ValueError):
    """An experiment configuration is invalid or inconsistent."""
