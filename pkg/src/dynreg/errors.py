"""Exception types shared across the package."""


class ShapeError(ValueError):
    """An operation received inputs whose shapes do not conform."""


class ConfigError(ValueError):
    """A network, schedule, or run configuration is inconsistent."""


class NumericError(FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class IdxFormatError(ValueError):
    """An IDX file is malformed. ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
