"""Exception hierarchy shared across the library.

The CLI maps these onto exit codes: validation-type errors exit 1,
runtime-type errors exit 2.
"""


class LocalDiffError(Exception):
    """Base class for all library errors."""


class ShapeError(LocalDiffError):
    """Operands have incompatible shapes; nothing is broadcast silently."""


class ParameterError(LocalDiffError):
    """A numeric parameter is out of its legal range."""


class ValidationError(LocalDiffError):
    """An input object (scene spec, config, file) violates its invariants."""


class VocabularyError(ValidationError):
    """A token id or token string is not in the model vocabulary."""


class UsageError(LocalDiffError):
    """An operation was invoked in a state it does not support."""


class GuidanceError(LocalDiffError):
    """A guidance operator received degenerate inputs or produced
    non-finite values."""


class TrainingError(LocalDiffError):
    """Training diverged; carries the last good checkpoint path if any."""

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


class NonFiniteError(LocalDiffError):
    """A tensor that must be finite contains NaN or Inf."""


class FileFormatError(ValidationError):
    """A serialized file is malformed; ``offset`` is the byte position."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset
