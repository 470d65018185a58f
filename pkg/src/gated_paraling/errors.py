"""Exception hierarchy shared by every stage of the pipeline."""


class GatedParalingError(Exception):
    """Base class for all package errors."""


class DataError(GatedParalingError):
    """Bad or missing input data (maps to CLI exit code 2)."""


class UnsupportedFormat(DataError):
    pass


class SilentAudio(DataError):
    pass


class InvalidSpan(DataError):
    pass


class LengthMismatch(DataError, ValueError):
    pass


class RateMismatch(DataError, ValueError):
    pass


class EmptyInput(DataError, ValueError):
    pass


class ShapeMismatch(GatedParalingError, ValueError):
    pass


class MissingForwardCache(GatedParalingError, RuntimeError):
    """Raised when ``backward`` is called without a preceding training forward."""


class EmptyTrainingSet(DataError, ValueError):
    pass


class LabelOutOfRange(DataError, ValueError):
    pass


class IndexOutOfRange(GatedParalingError, IndexError):
    pass


class OutOfRange(DataError, ValueError):
    pass


class EmptyPredictions(GatedParalingError, ValueError):
    pass


class EmptySession(DataError, ValueError):
    pass


class EmptyMatrix(GatedParalingError, ValueError):
    pass


class SingleClass(GatedParalingError, ValueError):
    pass


class TooFewSpeakers(DataError, ValueError):
    pass


class InvalidSpec(GatedParalingError, ValueError):
    pass


class MissingCache(DataError):
    pass


class ConfigError(GatedParalingError, ValueError):
    pass
