"""Exception hierarchy shared across the package."""


class TapsError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(TapsError, ValueError):
    pass


class BatchSizeError(TapsError, ValueError):
    pass


class ContractError(TapsError, ValueError):
    """A caller violated a documented precondition."""


class ConfigurationError(TapsError, ValueError):
    pass


class ProvenanceError(TapsError):
    """A task model does not descend from the store's base model."""


class NotFoundError(TapsError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class NonFiniteError(TapsError, FloatingPointError):
    pass


class OffsetError(TapsError):
    """An error tied to a byte position in a file."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class CorruptionError(OffsetError):
    pass


class FormatError(OffsetError):
    pass


class TrainingAborted(TapsError):
    """Training hit a non-finite value; ``model`` holds the last good epoch."""

    def __init__(self, message, model=None, history=None):
        super().__init__(message)
        self.model = model
        self.history = history or []
