"""Exception hierarchy shared across the package."""


class HfvitError(Exception):
    """Base class for all package errors."""


class DimensionError(HfvitError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(HfvitError, RuntimeError):
    """A documented precondition was violated."""


class InfeasibleError(HfvitError, ValueError):
    """No configuration can satisfy the request."""


class NumericError(HfvitError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class DataError(HfvitError, ValueError):
    """Input data is malformed or inconsistent."""


class WeightsFormatError(DataError):
    """Weights file could not be parsed."""


class BadMagicError(WeightsFormatError):
    pass


class VersionMismatchError(WeightsFormatError):
    pass


class TruncatedRecordError(WeightsFormatError):
    pass


class FusedFlagMismatchError(ContractError):
    """Weights are fused but the caller expects an unfused model, or vice versa."""
