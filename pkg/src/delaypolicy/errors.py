"""Exception hierarchy.

The CLI maps these onto exit codes: :class:`DataError` -> 2,
:class:`NumericalError` -> 3.
"""

from __future__ import annotations


class DelayPolicyError(Exception):
    """Base class for all toolkit errors."""


class DataError(DelayPolicyError):
    """Malformed, inconsistent or unusable data."""


class UnsupportedVersionError(DataError):
    pass


class TruncatedDatasetError(DataError):
    def __init__(self, record: int, message: str = "truncated record"):
        super().__init__(f"record {record}: {message}")
        self.record = record


class DimensionMismatchError(DataError):
    def __init__(self, record: int, message: str = "dimension inconsistency"):
        super().__init__(f"record {record}: {message}")
        self.record = record


class EmptyTrajectoryError(DataError):
    pass


class UnreachableError(DataError):
    """A trajectory cannot be compressed for the requested delay."""


class InfeasibleDemoError(DataError):
    pass


class SchemaError(DataError):
    pass


class NumericalError(DelayPolicyError):
    """Non-finite values or divergence during training or sampling."""


class NonFiniteError(NumericalError):
    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class DivergenceError(NumericalError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step} (loss={loss:.3e})")
        self.step = step
        self.loss = loss


class ChunkLengthError(DelayPolicyError, ValueError):
    pass
