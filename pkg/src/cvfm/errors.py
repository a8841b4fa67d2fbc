"""Exception hierarchy shared across the package."""


class CVFMError(Exception):
    """Base class for all package errors."""


class StructuralError(CVFMError, ValueError):
    """Shapes or spaces do not line up."""


class ConfigError(CVFMError, ValueError):
    """Invalid configuration, raised before any compute starts."""


class UsageError(CVFMError, RuntimeError):
    """An API was called in the wrong order or with the wrong mode."""


class DataError(CVFMError, ValueError):
    """Inputs violate a data contract (e.g. non one-hot targets)."""


class NumericError(CVFMError, ArithmeticError):
    """A non-finite value was produced."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class FormatError(CVFMError, ValueError):
    """A binary/text artifact failed to parse or has the wrong version."""
