"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Raised when array extents or channel counts do not line up."""

    def __init__(self, message, expected=None, got=None):
        super().__init__(message)
        self.expected = expected
        self.got = got


class ContractError(RuntimeError):
    """A call violated an operation's precondition."""


class ConfigError(ValueError):
    """Invalid architecture, run or phantom configuration."""


class DataError(RuntimeError):
    """Missing, malformed or empty data on disk."""


class CheckpointError(DataError):
    """Checkpoint cannot be read or does not match the requested architecture."""


class NumericError(ArithmeticError):
    """Training produced a non-finite loss."""
