"""
SKPD error types

Every error raised by the library derives from SkpdError and, where one fits,
from the matching builtin so callers can catch either.
"""

from typing import Any, Optional


class SkpdError(Exception):
    """Base class for all library errors"""


class ShapeMismatchError(SkpdError, ValueError):
    """Tensor, matrix or config dimensions do not agree"""


class NonFiniteError(SkpdError, ValueError):
    """NaN or Inf found where finite values are required"""


class DimensionOverflowError(SkpdError, OverflowError):
    """A product of dimensions exceeds what the platform can index"""


class ConvergenceError(SkpdError, RuntimeError):
    """
    An iterative method ran out of its iteration budget

    The best available result is attached as `partial` so callers can
    still inspect it.
    """

    def __init__(self, message: str, partial: Optional[Any] = None):
        super().__init__(message)
        self.partial = partial


class NonFiniteObjectiveError(SkpdError, FloatingPointError):
    """The penalized objective became NaN or Inf during a fit"""


class SingleClassError(SkpdError, ValueError):
    """Labels contain only one class where both are required"""


class InsufficientClassCountError(SkpdError, ValueError):
    """A class has fewer members than the number of requested folds"""


class TemplateError(SkpdError, ValueError):
    """Unknown signal template or template geometry out of bounds"""


class ContainerFormatError(SkpdError, ValueError):
    """Binary container has the wrong magic, version or layout"""


class ChecksumError(ContainerFormatError):
    """Binary container payload is truncated or fails its CRC32"""


class CsvFormatError(SkpdError, ValueError):
    """CSV input is ragged, misses columns or holds invalid labels"""


class ExperimentConfigError(SkpdError, ValueError):
    """Experiment config has unknown keys or unparsable values"""
