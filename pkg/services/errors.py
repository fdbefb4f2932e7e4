"""
SPDE Volatility Lab - Error taxonomy
Every failure raised by the services derives from LabError (a ValueError),
so callers can catch one type and the HTTP layer can map it to a 400.
"""


class LabError(ValueError):
    """Base class for all lab failures."""


class DimensionError(LabError):
    """Objects live on different spaces or have the wrong length."""


class DomainError(LabError):
    """A parameter lies outside its mathematical domain (negative time, bad exponent)."""


class GridError(LabError):
    """A shift time is not a whole number of grid cells."""


class OutOfRangeError(LabError):
    """An index or count exceeds the available resolution."""


class ArgumentError(LabError):
    """Malformed call: empty grids, factor-count mismatch, reversed windows."""


class WindowError(LabError):
    """Not enough increments in the estimation window."""


class ConfigError(LabError):
    """Experiment configuration is invalid or inconsistent."""

    def __init__(self, message: str, location: str | None = None, line: int | None = None):
        self.location = location
        self.line = line
        prefix = ""
        if location:
            prefix = f"{location}: "
        if line is not None:
            prefix = f"line {line}: {prefix}"
        super().__init__(f"{prefix}{message}")


class NumericalError(LabError):
    """A factorization or solve failed."""
