"""Exception types raised across the package."""


class HandSLTError(Exception):
    """Base class for all package errors."""


class ConfigurationError(HandSLTError, ValueError):
    pass


class ShapeError(HandSLTError, ValueError):
    pass


class EmptyPoolError(HandSLTError, ValueError):
    pass


class NumericDomainError(HandSLTError, ValueError):
    pass


class ValidationError(HandSLTError, ValueError):
    pass


class EmptyVideoError(ValidationError):
    pass


class IngestionError(HandSLTError, OSError):
    """A dataset file is missing or unreadable."""

    def __init__(self, message: str, path=None, sample_id: str | None = None):
        super().__init__(message)
        self.path = path
        self.sample_id = sample_id


class TrainingDivergenceError(HandSLTError, RuntimeError):
    def __init__(self, message: str, component: str):
        super().__init__(message)
        self.component = component


class IncompatibleCheckpointError(HandSLTError, KeyError):
    def __init__(self, missing: list[str]):
        super().__init__(f"checkpoint is missing tensors: {', '.join(missing)}")
        self.missing = missing

    def __str__(self) -> str:
        return self.args[0]


class BackendError(HandSLTError, RuntimeError):
    def __init__(self, message: str, segment_index: int | None = None, attempts: int = 0):
        super().__init__(message)
        self.segment_index = segment_index
        self.attempts = attempts
