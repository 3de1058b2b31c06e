"""Exception hierarchy shared by every twinsys module."""


class TwinSystemError(Exception):
    """Base class for all domain errors raised by twinsys."""


class DatasetError(TwinSystemError):
    pass


class ShapeError(TwinSystemError):
    pass


class ModelFormatError(TwinSystemError):
    pass


class TrainingError(TwinSystemError):
    pass


class WeightingError(TwinSystemError):
    pass


class RetrievalError(TwinSystemError):
    pass


class ExplanationError(TwinSystemError):
    pass


class EvaluationError(TwinSystemError):
    pass
