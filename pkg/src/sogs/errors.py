"""Exception taxonomy shared by all modules."""


class SogsError(Exception):
    """Base class for every error raised by this package."""


class InputError(SogsError):
    """A caller handed in data that violates a precondition."""


class ConfigError(SogsError):
    """Shapes, dimensions, or settings are inconsistent with each other."""


class NumericalError(SogsError):
    """A computation produced non-finite values."""


class UsageError(SogsError):
    """An API was called in the wrong order or on the wrong kind of value."""


class OracleError(SogsError):
    """A finite-difference probe hit a non-finite function value."""


class FormatError(SogsError):
    """A file on disk does not match its declared binary layout.

    ``offset`` is the byte position at which parsing failed, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


class CheckpointError(SogsError):
    """Base class for checkpoint container problems."""


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class TrainingDivergedError(SogsError):
    """Training hit a non-finite loss.  Carries the failing iteration and the
    most recent healthy checkpoint so runs can be resumed or inspected."""

    def __init__(self, iteration: int, checkpoint=None):
        super().__init__(f"non-finite loss at iteration {iteration}")
        self.iteration = iteration
        self.checkpoint = checkpoint
