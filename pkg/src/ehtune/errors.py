"""Exception types raised across the package."""


class EhtuneError(Exception):
    """Base class for all package errors."""


class ShapeError(EhtuneError, ValueError):
    pass


class ConfigError(EhtuneError, ValueError):
    pass


class ContractError(EhtuneError, ValueError):
    """A documented precondition of an operation was violated."""


class SequenceLengthError(EhtuneError, ValueError):
    pass


class OutOfRangeError(EhtuneError, IndexError):
    """A token id or class label lies outside its valid range."""


class CheckpointError(EhtuneError, ValueError):
    pass


class TrainingError(EhtuneError, RuntimeError):
    """Raised when optimisation produces non-finite values."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step
