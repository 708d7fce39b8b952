"""Exception types shared across the package."""


class MemlabError(Exception):
    """Base class for all package errors."""


class NumericalInputError(MemlabError, ValueError):
    """Non-finite values where finite ones are required."""


class ContractViolation(MemlabError, ValueError):
    """Shapes or indices inconsistent with the model configuration."""


class VocabularyError(MemlabError, ValueError):
    """Token ids out of range, or a vocabulary too small for a request."""


class ConfigError(MemlabError, ValueError):
    """Invalid run or model configuration."""


class NumericalFailure(MemlabError, FloatingPointError):
    """Training or gradient computation produced non-finite values."""

    def __init__(self, message, name=None):
        super().__init__(message)
        self.name = name
