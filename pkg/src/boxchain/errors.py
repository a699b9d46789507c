"""Exception hierarchy. Each class maps to a distinct CLI exit code."""

from __future__ import annotations


class BoxchainError(Exception):
    """Base for all pipeline errors."""

    exit_code = 1


class ConfigError(BoxchainError):
    """Bad or missing configuration."""

    exit_code = 2


class InputFormatError(BoxchainError):
    """A file does not conform to its interchange format."""

    exit_code = 3


class LayoutFormatError(InputFormatError):
    """Layout interchange file is malformed."""


class LayoutRecordError(InputFormatError):
    """A single layout record is unusable (e.g. empty after clipping)."""


class BackendError(BoxchainError):
    """Model backend failure."""

    exit_code = 4


class BackendUnavailableError(BackendError):
    """Backend unreachable after retries."""


class CapabilityError(BackendError):
    """Endpoint refused the request payload (e.g. images not accepted)."""


class ValidationError(BoxchainError):
    """Domain invariant violated."""

    exit_code = 5


class ParameterError(ValidationError):
    """Caller passed an out-of-contract argument."""


class BindingError(ValidationError):
    """Layout and image do not belong together (dimension mismatch)."""


class CorruptRecordError(ValidationError):
    """Stored record failed invariant validation on load."""


class JoinError(ValidationError):
    """Prediction/gold files do not join on sample ids."""


class StateError(ValidationError):
    """Illegal state transition (e.g. verdict on a non-pending item)."""


class ConflictError(StateError):
    """Conflicting verdict for an item that already has one."""
