"""
Error types raised across the estimation pipeline
"""
from typing import Optional


class ProxyDeconfoundError(Exception):
    """Base class for all errors raised by this package"""


class ConfigError(ProxyDeconfoundError):
    """Invalid experiment config or settings"""


class DimensionError(ProxyDeconfoundError, ValueError):
    """Array shapes or lengths do not line up"""


class DomainError(ProxyDeconfoundError, ValueError):
    """Argument outside the support of a distribution or operation"""


class StateError(ProxyDeconfoundError, RuntimeError):
    """Operation called in the wrong order (e.g. backward before forward)"""


class MissingModalityError(ProxyDeconfoundError, KeyError):
    """A requested modality is masked or not declared"""

    def __str__(self) -> str:
        # KeyError quotes its message; keep it readable
        return str(self.args[0]) if self.args else ""


class DatasetFormatError(ProxyDeconfoundError):
    """Dataset directory is missing files or has inconsistent columns"""


class RegressionError(ProxyDeconfoundError, ValueError):
    """Singular normal equations in a least-squares fit"""


class IdentificationError(ProxyDeconfoundError, ValueError):
    """Treatment effect is not identifiable from the supplied quantities"""

    def __init__(self, message: str, condition_numbers: Optional[dict] = None):
        super().__init__(message)
        self.condition_numbers = condition_numbers or {}


class RankError(IdentificationError):
    """Numerical rank is below the required target dimension"""

    def __init__(self, message: str, singular_values=None):
        super().__init__(message)
        self.singular_values = singular_values


class TrainingError(ProxyDeconfoundError, RuntimeError):
    """Training produced a non-finite objective"""

    def __init__(self, message: str, epoch: int):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch


class ReportError(ProxyDeconfoundError):
    """Report files cannot be combined (differing columns)"""
