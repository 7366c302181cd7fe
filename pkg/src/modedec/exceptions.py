"""Exception types raised across the package."""


class ModedecError(Exception):
    """Base class for all package errors."""


class InvalidInputError(ModedecError, ValueError):
    """Argument violates an operation's precondition."""


class SingularMatrixError(ModedecError, ArithmeticError):
    """A non-positive pivot was met while factorizing a tridiagonal system."""


class StateError(ModedecError, RuntimeError):
    """Operation called in the wrong order (e.g. backward before forward)."""


class ModelFormatError(ModedecError, ValueError):
    """Checkpoint document cannot be turned into a model."""


class MalformedDocumentError(ModelFormatError):
    pass


class VersionMismatchError(ModelFormatError):
    pass


class ShapeMismatchError(ModelFormatError):
    pass


class DataIngestionError(ModedecError, ValueError):
    """Series or label files are missing, inconsistent or non-numeric."""


class DivergenceError(ModedecError, FloatingPointError):
    """Training produced a non-finite loss."""
