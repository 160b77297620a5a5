"""Exception types shared across the package."""


class TitanError(Exception):
    """Base class for all package errors."""


class ShapeError(TitanError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(TitanError, ValueError):
    """Invalid model or run configuration."""


class FormatError(ConfigError):
    """Malformed input file."""


class SizingError(ConfigError):
    """Not enough data for the requested windows or splits."""


class DegenerateChannelError(ConfigError):
    """A channel has zero variance or no observed values."""


class VersionError(ConfigError):
    """Checkpoint does not match the expected format or model shape."""


class DivergenceError(TitanError, ArithmeticError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message: str, last_good=None):
        super().__init__(message)
        self.last_good = last_good
