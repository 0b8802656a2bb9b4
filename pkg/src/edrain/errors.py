"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """A caller passed a tensor or value that violates an operation's contract."""


class InvalidState(RuntimeError):
    """An operation was invoked on an object that cannot support it (e.g. empty set)."""


class UnsupportedFormat(OSError):
    """A file exists but its encoding is not one we read (e.g. 16-bit PNG)."""


class CheckpointError(OSError):
    """Checkpoint bytes are malformed or carry an unsupported version."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; ``dump_path`` points at the saved offending batch."""

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path
