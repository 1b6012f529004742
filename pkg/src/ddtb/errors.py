"""Exception types shared across the package."""


class DDTBError(Exception):
    """Base class for all package errors."""


class ShapeError(DDTBError, ValueError):
    """Tensor dimensions do not compose.

    ``axes`` names the offending axes so callers can report them.
    """

    def __init__(self, message, axes=()):
        super().__init__(message)
        self.axes = tuple(axes)


class ParameterError(DDTBError, ValueError):
    pass


class StateError(DDTBError, RuntimeError):
    """An object is used before it has been calibrated or initialized."""


class GradientError(DDTBError, RuntimeError):
    pass


class ConfigError(DDTBError, ValueError):
    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class CheckpointError(DDTBError, IOError):
    pass


class ImageIOError(DDTBError, IOError):
    def __init__(self, message, path=None):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class TrainingDiverged(DDTBError, RuntimeError):
    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot
