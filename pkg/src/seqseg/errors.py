"""Exception types shared across the package.

Plain ``ValueError`` is used for ordinary argument validation; the classes
here exist where callers need to distinguish failure kinds (file parsing,
checkpoint/config agreement, numeric blow-ups during training).
"""


class VolumeHeaderError(ValueError):
    """Volume file header is missing, malformed or inconsistent."""


class VolumePayloadError(ValueError):
    """Volume file payload is truncated or does not match the header."""


class CheckpointError(ValueError):
    """Checkpoint file is malformed or truncated."""


class ConfigMismatchError(ValueError):
    """A checkpoint or run was produced under an incompatible configuration."""


class NumericsError(RuntimeError):
    """A non-finite value appeared where training cannot continue."""


class TrainingAborted(RuntimeError):
    """Training hit a numeric failure; carries the last good parameter state."""

    def __init__(self, message, best_state=None, history=None):
        super().__init__(message)
        self.best_state = best_state
        self.history = history if history is not None else []
