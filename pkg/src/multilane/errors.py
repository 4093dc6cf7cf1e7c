"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes (see cli.py), so new error
conditions should reuse one of the classes below instead of raising bare
ValueError/RuntimeError.
"""


class MultilaneError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(MultilaneError):
    """Operand extents do not satisfy an operation's contract."""


class ConfigError(MultilaneError):
    """Invalid or inconsistent configuration values."""


class ArchiveError(MultilaneError):
    """Malformed tensor archive or entry mismatch while loading."""


class IntegrityError(MultilaneError):
    """Cross-object consistency violation (duplicate class ids, checkpoint vs dataset mismatch, ...)."""


class ProtocolError(MultilaneError):
    """Incremental-learning protocol violated (retraining a completed task, wrong task order, ...)."""


class GradError(MultilaneError):
    """Autodiff contract violation (non-scalar loss, backward without tape, ...)."""


class ScoreBoundError(MultilaneError):
    """A task-forward attention score matrix exceeded its configured bound."""
