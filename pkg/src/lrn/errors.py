"""Exception types raised across the package."""


class LRNError(Exception):
    pass


class DimensionError(LRNError, ValueError):
    """Tensor shapes do not satisfy an operation's contract."""


class DataError(LRNError, ValueError):
    """Input values are invalid (out-of-range labels, non-finite data, empty datasets)."""


class CodecError(LRNError, ValueError):
    """Malformed file or byte stream."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UsageError(LRNError, RuntimeError):
    """An API was called out of order, e.g. backward without a forward cache."""


class ConfigError(LRNError, ValueError):
    pass
