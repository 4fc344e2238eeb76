# src/errors.py


class NowcastError(Exception):
    """Base class for every error raised by the package."""


class ValidationError(NowcastError, ValueError):
    """Bad input: configuration, shapes, arities. The CLI exits with code 2."""


class ConfigError(ValidationError):
    pass


class InvalidKernelError(ValidationError):
    pass


class InvalidOrderError(ValidationError):
    pass


class DomainTooSmallError(ValidationError):
    pass


class DimensionError(ValidationError):
    pass


class ArityError(ValidationError):
    pass


class InfeasibleSplitError(ValidationError):
    pass


class DataError(ValidationError):
    """Missing or malformed files on disk (index, manifest, frames)."""


class TrainingError(NowcastError, RuntimeError):
    """Runtime failure during optimization. The CLI exits with code 3."""


class EmptyDatasetError(TrainingError):
    pass


class TrainingDivergedError(TrainingError):
    pass
