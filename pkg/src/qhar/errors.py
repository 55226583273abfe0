"""Exception hierarchy shared across the runtime."""


class QharError(Exception):
    """Base class for all runtime errors."""


class ConfigError(QharError, ValueError):
    """Invalid network configuration or layer parameters.

    ``line`` is set when the error comes from a config file.
    """

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class WeightFormatError(QharError):
    """Malformed QHW1 weight file."""


class BadMagicError(WeightFormatError):
    pass


class VersionMismatchError(WeightFormatError):
    pass


class TruncatedFileError(WeightFormatError):
    pass


class WeightMismatchError(QharError):
    """Weight records do not match the network configuration."""


class FrameFormatError(QharError):
    """Malformed or unsupported PGM/PPM frame."""


class UnsupportedMagicError(FrameFormatError):
    pass


class UnsupportedMaxvalError(FrameFormatError):
    pass


class PayloadMismatchError(FrameFormatError):
    pass


class InfeasiblePlanError(QharError):
    """No tiling plan fits the on-chip buffer budget."""
