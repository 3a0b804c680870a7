"""Domain exceptions. The CLI maps any EndoTtapError to exit code 1."""


class EndoTtapError(Exception):
    """Base class for all domain errors raised by this package."""


class FrameSizeMismatchError(EndoTtapError):
    pass


class ShapeMismatchError(EndoTtapError):
    pass


class NonFiniteInputError(EndoTtapError):
    pass


class UnmatchedLabelError(EndoTtapError):
    pass


class NoReliableAnchorsError(EndoTtapError):
    pass


class TeacherError(EndoTtapError):
    pass


class EmptyEvaluationSetError(EndoTtapError):
    pass


class FileFormatError(EndoTtapError):
    pass


class CheckpointVersionError(EndoTtapError):
    pass


class FoldOverRiskError(EndoTtapError):
    pass


class TrainingDivergedError(EndoTtapError):
    pass
