"""Exception hierarchy shared by every module."""


class ArtcriticError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(ArtcriticError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(ArtcriticError, ValueError):
    """A documented precondition was violated."""


class LengthError(ContractError):
    """A token sequence exceeds the configured budget."""


class FormatError(ArtcriticError, ValueError):
    """A file or encoded value is malformed."""


class UndefinedMetricError(ArtcriticError, ValueError):
    """A statistic is undefined for the given input (e.g. constant data)."""


class InsufficientDataError(UndefinedMetricError):
    """Too few observations for the requested statistic."""


class NumericalError(ArtcriticError, ArithmeticError):
    """Training diverged (NaN or infinite loss)."""
