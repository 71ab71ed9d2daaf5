"""Exception types raised across the package."""


class GLSSError(Exception):
    """Base class for all package errors."""


class InvalidInputError(GLSSError, ValueError):
    pass


class MalformedDatasetError(GLSSError):
    pass


class TrainingDivergedError(GLSSError):
    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class SearchDivergedError(GLSSError):
    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = list(trajectory or [])


class NumericError(GLSSError, FloatingPointError):
    def __init__(self, message, iteration=None, z_norm=None):
        super().__init__(message)
        self.iteration = iteration
        self.z_norm = z_norm


class CheckpointError(GLSSError):
    pass


class StageError(GLSSError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, message, stage=None):
        super().__init__(message)
        self.stage = stage
