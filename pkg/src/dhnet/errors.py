class DHNetError(Exception):
    pass


class ConfigError(DHNetError, ValueError):
    """Inconsistent shapes, channel counts or configuration values."""


class NumericError(DHNetError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class CheckpointError(DHNetError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    def __init__(self, found, expected):
        super().__init__(f"checkpoint format version {found} is not supported (expected {expected})")
        self.found = found
        self.expected = expected


class TruncatedCheckpointError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass
