"""Exception hierarchy shared by every module in the package."""


class StagedTrainError(Exception):
    """Base class for all package errors."""


# nn-core
class ShapeMismatch(StagedTrainError, ValueError):
    pass


class LabelOutOfRange(StagedTrainError, ValueError):
    pass


class NoForwardState(StagedTrainError, RuntimeError):
    pass


class LengthMismatch(StagedTrainError, ValueError):
    pass


class EpochOutOfRange(StagedTrainError, ValueError):
    pass


class ArchitectureMismatch(StagedTrainError, ValueError):
    pass


class CorruptPayload(StagedTrainError, ValueError):
    pass


class NoSuchLayer(StagedTrainError, IndexError):
    pass


class NotAConvActivation(StagedTrainError, ValueError):
    pass


class RangeOutOfBounds(StagedTrainError, IndexError):
    pass


# acm
class EmptyClass(StagedTrainError, ValueError):
    pass


class SameClass(StagedTrainError, ValueError):
    pass


class TooFewClasses(StagedTrainError, ValueError):
    pass


class DegenerateCluster(StagedTrainError, ArithmeticError):
    pass


# staged training
class NonPositiveTau(StagedTrainError, ValueError):
    pass


class NonPositiveBeta(StagedTrainError, ValueError):
    pass


class RollbackWithoutCheckpoint(StagedTrainError, RuntimeError):
    pass


class InsufficientClassSamples(StagedTrainError, ValueError):
    pass


# perturbations
class NonConvergence(StagedTrainError, UserWarning):
    """Issued as a warning when a generator hits its outer-iteration cap."""


class TooManyClasses(StagedTrainError, ValueError):
    pass


# data
class MalformedFile(StagedTrainError, ValueError):
    pass


class IoFailure(StagedTrainError, OSError):
    pass


class BadKernel(StagedTrainError, ValueError):
    pass


# harness
class ConfigError(StagedTrainError, ValueError):
    pass


class MissingLogs(StagedTrainError, FileNotFoundError):
    pass


class MissingReferenceCheckpoint(StagedTrainError, FileNotFoundError):
    pass
