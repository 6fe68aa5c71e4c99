"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Bad argument, configuration, or data contents."""


class ShapeError(ValidationError):
    """Operand dimensions do not agree."""


class FormatError(ValueError):
    """Malformed SGT1/SGM1 byte stream.

    ``offset`` is the byte position where decoding failed and ``entry`` the
    checkpoint entry being read, if any.
    """

    def __init__(self, message, offset=None, entry=None):
        parts = [message]
        if entry is not None:
            parts.append(f"entry {entry!r}")
        if offset is not None:
            parts.append(f"offset {offset}")
        super().__init__(" at ".join(parts) if len(parts) > 1 else message)
        self.offset = offset
        self.entry = entry


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""

    def __init__(self, epoch, batch, loss):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
