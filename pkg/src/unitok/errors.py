"""Exception hierarchy shared by every module."""


class UnitokError(Exception):
    """Base class for all package errors."""


class LengthError(UnitokError, ValueError):
    """Signal is too short or lengths disagree."""


class ConfigurationError(UnitokError, ValueError):
    """Invalid configuration (window/hop pair, schema violation, ...)."""


class DegenerateInputError(UnitokError, ValueError):
    """Input carries no usable signal (e.g. zero power)."""


class TemplateError(UnitokError, ValueError):
    """A mode was requested without the conditions its template needs."""


class GridError(UnitokError, ValueError):
    """Malformed token grid (wrong kind, PAD in interior, bad indices)."""


class TrainingFault(UnitokError, RuntimeError):
    """Non-finite loss or gradient during training."""

    def __init__(self, message, step=None, path=None):
        super().__init__(message)
        self.step = step
        self.path = path


class FormatError(UnitokError, ValueError):
    """Corrupt, truncated or unsupported file content."""
