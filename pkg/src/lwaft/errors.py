"""Exception hierarchy.

Validation errors map to CLI exit code 1, everything else under
:class:`LwaftError` to exit code 2.
"""


class LwaftError(Exception):
    """Base class for all package errors."""


class ValidationError(LwaftError, ValueError):
    """Bad input: invalid config, malformed file, inconsistent layouts."""


class LayoutMismatchError(ValidationError):
    pass


class BudgetError(ValidationError):
    pass


class FormatError(ValidationError):
    """A checkpoint, mask or suite file failed to parse or verify."""


class StaleCacheError(LwaftError, RuntimeError):
    """An activation cache was used after its parameters changed."""


class TrainingDivergedError(LwaftError, RuntimeError):
    def __init__(self, message: str, last_finite_step: int | None = None):
        super().__init__(message)
        self.last_finite_step = last_finite_step


class StageError(LwaftError, RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
