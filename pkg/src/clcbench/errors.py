"""Exception types shared across the package."""


class ClcError(Exception):
    """Base class for all clcbench errors."""


class ShapeError(ClcError):
    """Tensor shapes do not satisfy an operation's contract."""


class BadMagicError(ClcError):
    """A binary file does not start with the expected magic bytes."""


class VersionMismatchError(ClcError):
    """A binary file uses an unsupported format version."""


class TruncatedFileError(ClcError):
    """A binary file ended before a tensor was fully read."""

    def __init__(self, message: str, tensor_name: str = ""):
        super().__init__(message)
        self.tensor_name = tensor_name


class ChunkNotFoundError(ClcError):
    """Requested chunk id is not present in the store."""


class FingerprintMismatchError(ClcError):
    """Model fingerprint differs between writer and reader of cached data."""


class ConfigError(ClcError):
    """Invalid experiment or strategy configuration."""


class DataError(ClcError):
    """Malformed or missing dataset content."""
