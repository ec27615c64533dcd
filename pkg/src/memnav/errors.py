"""Exception hierarchy shared across the package."""

from __future__ import annotations


class MemNavError(Exception):
    """Base class for every error raised by memnav."""


class ConfigurationError(MemNavError, ValueError):
    pass


class OutOfBoundsError(MemNavError, ValueError):
    pass


class InvalidScanError(MemNavError, ValueError):
    pass


class DuplicateObservationError(MemNavError, KeyError):
    pass


class MissingObservationError(MemNavError, KeyError):
    pass


class InvalidQueryError(MemNavError, ValueError):
    pass


class GatewayError(MemNavError):
    """Transport-level failure talking to a model provider."""

    def __init__(self, message: str, retryable: bool = False):
        super().__init__(message)
        self.retryable = retryable


class SchemaError(MemNavError):
    """A model reply could not be parsed into the requested schema."""

    def __init__(self, message: str, raw: str = ""):
        super().__init__(message)
        self.raw = raw


class DecompositionError(MemNavError):
    def __init__(self, message: str, raw: str = ""):
        super().__init__(message)
        self.raw = raw


class VerificationError(MemNavError):
    pass


class ExtractionError(MemNavError):
    def __init__(self, message: str, raw: str = ""):
        super().__init__(message)
        self.raw = raw


class WorkflowValidationError(ExtractionError):
    """Pseudocode references a symbol it never declared."""


class SnapshotError(MemNavError):
    pass


class MigrationError(SnapshotError):
    """Snapshot written by an unsupported format version."""


class IntegrityError(SnapshotError):
    """Snapshot is truncated, corrupted, or fails its checksum."""


class SceneError(MemNavError, ValueError):
    pass
