"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """An argument violates an operation's preconditions."""


class CorruptFileError(IOError):
    """A packed sequence or checkpoint file is truncated or malformed."""


class SchemaVersionError(CorruptFileError):
    """A file was written with an unsupported schema version."""


class UndefinedDistanceError(ArithmeticError):
    """Cosine distance requested for an all-zero vector."""


class TrainingDiverged(RuntimeError):
    """Training loss became non-finite."""

    def __init__(self, message, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path
