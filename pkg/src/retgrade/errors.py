"""Exception hierarchy shared across the package."""


class RetgradeError(Exception):
    """Base class for every error raised by this package."""


class InvalidInputError(RetgradeError, ValueError):
    """An argument violates a documented precondition."""


class ShapeError(RetgradeError, ValueError):
    """Array shapes are incompatible with the requested operation."""


class StateError(RetgradeError, RuntimeError):
    """An operation was called out of order (e.g. backward before forward)."""


class ManifestError(RetgradeError, ValueError):
    """A manifest file could not be parsed; the message names the line."""


class ImageIOError(RetgradeError, OSError):
    """An image file could not be read or written; the message names the path."""


class NumericError(RetgradeError, ArithmeticError):
    """Training produced a non-finite value."""


class ConfigError(RetgradeError, ValueError):
    """An experiment config file or CLI flag combination is invalid."""


class CheckpointError(RetgradeError):
    """Base class for checkpoint serialization failures."""


class CheckpointFormatError(CheckpointError):
    """The file does not start with the expected magic bytes."""


class CheckpointVersionError(CheckpointError):
    """The file declares an unsupported format version."""


class CheckpointTruncatedError(CheckpointError):
    """The file ends before all declared payload bytes."""


class CheckpointChecksumError(CheckpointError):
    """The trailing CRC-32 does not match the file contents."""
