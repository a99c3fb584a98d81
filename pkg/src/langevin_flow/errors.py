"""
Exception types raised by langevin_flow.

Each concrete error also derives from the builtin exception a caller would
expect (``ValueError`` for bad input, ``RuntimeError`` for numerical
failures), so ``except ValueError`` keeps working.
"""

from typing import Optional


class LangevinFlowError(Exception):
    """Base class for all package errors."""


class DimensionError(LangevinFlowError, ValueError):
    """Tensor shapes or axes do not fit the operation."""


class ConfigurationError(LangevinFlowError, ValueError):
    """A configuration value is missing, out of range or inconsistent."""


class DomainError(LangevinFlowError, ValueError):
    """A value lies outside the mathematical domain of an operation."""


class DataError(LangevinFlowError, ValueError):
    """Observed data violates its contract (e.g. negative spike counts)."""


class ContractError(LangevinFlowError, ValueError):
    """A caller broke a precondition of an operation."""


class NumericError(LangevinFlowError, RuntimeError):
    """A computation produced non-finite values."""

    def __init__(self, message: str, step: Optional[int] = None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step


class FormatError(LangevinFlowError, ValueError):
    """A binary file is malformed, truncated or of the wrong version."""

    def __init__(self, message: str, offset: Optional[int] = None):
        if offset is not None:
            message = f"{message} at byte offset {offset}"
        super().__init__(message)
        self.offset = offset
