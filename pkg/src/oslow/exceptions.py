class OSLowError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(OSLowError, ValueError):
    pass


class NumericalError(OSLowError, ArithmeticError):
    """A computation produced or would produce a non-finite value."""


class TapeStateError(OSLowError, RuntimeError):
    pass


class InvalidPermutationError(OSLowError, ValueError):
    pass


class TrainingDivergedError(NumericalError):
    """The proxy score became non-finite during training."""

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


class ConfigError(OSLowError, ValueError):
    pass


class CheckpointError(OSLowError, ValueError):
    pass
