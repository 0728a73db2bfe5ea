"""Custom exceptions for the PANIC interpretable classification system."""

from typing import Optional, Any, Dict


class PanicError(Exception):
    """Base exception for the PANIC system."""

    exit_code = 1

    def __init__(
        self,
        message: str,
        error_code: Optional[str] = None,
        details: Optional[Dict[str, Any]] = None
    ):
        self.message = message
        self.error_code = error_code
        self.details = details or {}
        super().__init__(self.message)


class ConfigurationError(PanicError):
    """Raised when there's a configuration error."""

    exit_code = 2


class DataError(PanicError):
    """Raised when input data cannot be used."""

    exit_code = 3


class InvalidInputError(DataError):
    """Raised when a sample or batch violates its input contract."""
    pass


class DegenerateFeatureError(DataError):
    """Raised when a continuous feature has zero spread on the training split."""
    pass


class CorruptDataError(DataError):
    """Raised when a stored file is truncated or unreadable."""
    pass


class SchemaError(DataError):
    """Raised when headers, manifest and schema disagree."""
    pass


class SubjectNotFoundError(DataError):
    """Raised when a requested subject id is not in the dataset."""
    pass


class ModelError(PanicError):
    """Raised when a model operation cannot be carried out."""
    pass


class ProjectionError(ModelError):
    """Raised when prototypes cannot be projected onto training latents."""
    pass


class SingleClassError(ModelError):
    """Raised when an operation needs at least two classes."""
    pass


class DegenerateRequestError(ModelError):
    """Raised when an interpretation request is meaningless (e.g. class vs itself)."""
    pass


class NumericError(PanicError):
    """Raised on non-finite losses or failed numeric self-checks."""

    exit_code = 4


class CheckpointError(PanicError):
    """Raised when a checkpoint header or version is not recognized."""

    exit_code = 3
