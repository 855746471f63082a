"""Exception hierarchy. Each class carries the CLI exit code for its error class."""


class ReldistillError(Exception):
    exit_code = 1


class DomainError(ReldistillError, ValueError):
    """Input outside an operation's domain."""
    exit_code = 5


class BehindCameraError(DomainError):
    pass


class EmptyResultError(ReldistillError):
    """An extraction produced nothing (e.g. every pixel below the alpha threshold)."""
    exit_code = 6


class UndefinedResultError(ReldistillError):
    exit_code = 12


class NoGraspError(ReldistillError):
    """No grasp candidate available; the grasp-not-found failure class."""
    exit_code = 7


class TrainingError(ReldistillError):
    exit_code = 8

    def __init__(self, message, iteration=None):
        super().__init__(message if iteration is None else f"{message} (iteration {iteration})")
        self.iteration = iteration


class RemoteError(ReldistillError):
    exit_code = 9


class RemoteTimeoutError(RemoteError):
    pass


class ProtocolError(RemoteError):
    pass


class ConfigError(ReldistillError):
    exit_code = 4


class ParseError(ReldistillError):
    exit_code = 11

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class EmptySupervisionError(ReldistillError):
    """A relevancy channel has no present annotation in any view."""
    exit_code = 10


class StageError(ReldistillError):
    """A pipeline stage failed; wraps the original error with the stage name."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)
