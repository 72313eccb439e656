"""Exception classes raised across the pipeline."""


class LVQuantError(Exception):
    """Base class; the CLI prints ``ClassName: message`` for any subclass."""


class GeometryOverflow(LVQuantError):
    pass


class DatasetWriteError(LVQuantError):
    pass


class DegenerateMask(LVQuantError):
    pass


class AmbiguousPhase(LVQuantError):
    pass


class EmptySlice(LVQuantError):
    pass


class DegenerateScaler(LVQuantError):
    pass


class InsufficientPatients(LVQuantError):
    pass


class ShapeMismatch(LVQuantError):
    pass


class UnsupportedLayer(LVQuantError):
    pass


class ChannelUnderflow(LVQuantError):
    pass


class NonFiniteLoss(LVQuantError):
    pass


class UndefinedCorrelation(LVQuantError):
    pass


class TooFewPairs(LVQuantError):
    pass


class CandidateOverflow(LVQuantError):
    pass


class MissingCheckpoint(LVQuantError):
    pass


class ConfigError(LVQuantError):
    pass


class JobFailure(LVQuantError):
    """One or more (configuration, fold) training jobs failed."""


class InvalidOutput(LVQuantError):
    """A command's output failed its post-write validation."""
