"""Exception hierarchy shared by every module."""


class FibinetError(Exception):
    """Base class for all library errors."""


class DimensionError(FibinetError, ValueError):
    pass


class InputError(FibinetError, ValueError):
    pass


class SchemaError(FibinetError, ValueError):
    pass


class FitError(FibinetError, ValueError):
    pass


class ConfigError(FibinetError, ValueError):
    pass


class BatchSizeError(FibinetError, ValueError):
    pass


class StateError(FibinetError, RuntimeError):
    pass


class DeterminismError(FibinetError, RuntimeError):
    pass


class CheckpointError(FibinetError, RuntimeError):
    pass


class TrainingError(FibinetError, RuntimeError):
    """Raised on non-finite gradients or a diverging loss.

    ``history`` carries the per-epoch reports recorded before the abort.
    """

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])


class MetricError(FibinetError, ValueError):
    pass


class SplitError(FibinetError, ValueError):
    pass


class IngestError(FibinetError, RuntimeError):
    pass
