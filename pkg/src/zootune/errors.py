"""Exception hierarchy shared by every zootune module."""


class ZooTuneError(Exception):
    """Base class for all errors raised by zootune."""


class DimensionError(ZooTuneError, ValueError):
    pass


class GeometryError(ZooTuneError, ValueError):
    pass


class NonFiniteError(ZooTuneError, ValueError):
    pass


class DegenerateBatchError(ZooTuneError, ValueError):
    pass


class LabelError(ZooTuneError, ValueError):
    pass


class GraphError(ZooTuneError, RuntimeError):
    """Violation of the tape contract (non-scalar loss, reuse after backward)."""


class EvaluationError(ZooTuneError, ValueError):
    pass


class StateError(ZooTuneError, RuntimeError):
    """Layer or temporal-ensemble state is missing or inconsistent."""


class ConfigError(ZooTuneError, ValueError):
    pass


class SpecError(ZooTuneError, ValueError):
    pass


class ZooIncompatibleError(ZooTuneError, ValueError):
    pass


class TrainingError(ZooTuneError, RuntimeError):
    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration


class FormatError(ZooTuneError, ValueError):
    pass


class LengthError(FormatError):
    pass


class IntegrityError(FormatError):
    pass
