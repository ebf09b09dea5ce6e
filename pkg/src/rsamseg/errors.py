"""Exception hierarchy shared by every module."""


class RsamSegError(Exception):
    pass


class ParameterError(RsamSegError, ValueError):
    """An argument is outside its documented range."""


class ShapeError(RsamSegError, ValueError):
    """Tensor shapes are incompatible."""


class ConfigurationError(RsamSegError, ValueError):
    """A model or run configuration is internally inconsistent."""


class DataError(RsamSegError):
    """Input data is missing, malformed or non-finite."""


class CheckpointError(RsamSegError):
    """A checkpoint archive cannot be read or does not fit the model."""


class BackboneImportError(RsamSegError):
    """Imported tensors conflict with the destination model."""


class TrainingError(RsamSegError, RuntimeError):
    """Optimization diverged or otherwise cannot continue."""
