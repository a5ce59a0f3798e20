"""Exception hierarchy shared by every module."""


class MadiffError(Exception):
    """Base class for package errors."""


class ParameterError(MadiffError, ValueError):
    """An argument is outside its documented domain."""


class SingularityError(MadiffError, ArithmeticError):
    """A computation would divide by zero."""


class ConfigurationError(MadiffError):
    """Assembled components are inconsistent (e.g. an unknown conditioning class)."""


class StateError(MadiffError):
    """Required intermediate state is missing."""


class TrainingError(MadiffError):
    """Training produced a non-finite loss.

    ``last_good`` holds the parameters from the last finite step.
    """

    def __init__(self, message, last_good=None, diagnostics=None):
        super().__init__(message)
        self.last_good = last_good
        self.diagnostics = diagnostics or {}


class FormatError(MadiffError):
    """A file on disk does not match its declared format."""


class StageError(MadiffError):
    """An editing stage failed; ``stage`` names it."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
