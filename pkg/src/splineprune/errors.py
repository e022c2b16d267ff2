"""Exception types shared across the package."""


class SplinePruneError(Exception):
    """Base class for all package errors."""


class DimensionError(SplinePruneError, ValueError):
    pass


class LabelError(SplinePruneError, ValueError):
    pass


class DivergenceError(SplinePruneError, RuntimeError):
    """Raised when a loss or gradient stops being finite.

    ``epoch`` is the (1-based) epoch in which it happened and ``history``
    holds the metrics of every epoch that completed before it.
    """

    def __init__(self, message, epoch=None, history=None):
        super().__init__(message)
        self.epoch = epoch
        self.history = list(history or [])


class AlignmentError(SplinePruneError, ValueError):
    pass


class DegenerateSliceError(SplinePruneError, ValueError):
    pass


class DegenerateUnitError(SplinePruneError, ValueError):
    pass


class NotEnoughUnitsError(SplinePruneError, ValueError):
    pass


class ConfigError(SplinePruneError, ValueError):
    pass


class FormatError(SplinePruneError, ValueError):
    """Malformed binary input; ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UnsupportedArchitectureError(SplinePruneError, ValueError):
    pass
