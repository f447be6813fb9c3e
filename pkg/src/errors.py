"""
Exception types raised by the PCAg simulator
"""

from typing import Iterable, Optional


class PcagError(Exception):
    """Base class for all simulator errors"""


class DimensionError(PcagError, ValueError):
    """Vector or matrix sizes do not agree"""


class NonSymmetricError(DimensionError):
    """A symmetric matrix was required"""


class DegenerateInputError(PcagError, ValueError):
    """Not enough data to compute the requested statistic"""


class ZeroVectorError(PcagError, ArithmeticError):
    """A power iteration step produced an exactly zero vector"""


class ZeroNormError(ZeroVectorError):
    """
    The aggregated norm of a distributed iterate is zero

    load carries the packets the failed round already sent, when known
    """

    def __init__(self, message: str, load=None):
        self.load = load
        super().__init__(message)


class ConnectivityError(PcagError):
    """Some sensors cannot reach the root at the given radio range"""

    def __init__(self, unreachable: Iterable[int], radio_range: Optional[float] = None):
        self.unreachable = sorted(unreachable)
        self.radio_range = radio_range
        where = f" at range {radio_range:g} m" if radio_range is not None else ""
        super().__init__(f"Sensors unreachable from root{where}: {self.unreachable}")


class IncompleteRoundError(PcagError):
    """A node did not receive a value from every neighbor in a round"""


class UnequalEpochError(PcagError):
    """Node states were updated for different numbers of epochs"""


class TraceFormatError(PcagError, ValueError):
    """A trace or positions file could not be parsed"""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(f"{prefix}{message}")


class ConfigError(PcagError, ValueError):
    """Configuration failed validation"""
