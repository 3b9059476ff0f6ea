class BrainStateError(Exception):
    """Base class for errors raised by this package."""


class NumericalError(BrainStateError):
    """An iterative numerical routine failed to converge or produced non-finite values."""


class DegenerateInputError(BrainStateError, ValueError):
    pass


class InsufficientDataError(BrainStateError, ValueError):
    pass


class FormatError(BrainStateError, ValueError):
    """A file did not conform to its binary layout."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class StateError(BrainStateError, RuntimeError):
    """An operation was called in the wrong lifecycle state (e.g. backward before forward)."""
