"""Exception types shared across the package."""


class SomaError(Exception):
    """Base class for all package errors."""


class ValidationError(SomaError, ValueError):
    """An input violates a documented precondition (shape, level, finiteness)."""


class ConfigurationError(SomaError, ValueError):
    """A run or model configuration is inconsistent or incomplete."""


class DataLoadError(SomaError, RuntimeError):
    """A dataset file is missing, truncated, or malformed."""


class DegenerateInputError(SomaError, ValueError):
    """An operation received an empty or otherwise degenerate input."""


class DivergenceError(SomaError, ArithmeticError):
    """Optimization produced a non-finite loss term."""
