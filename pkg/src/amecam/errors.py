"""Exception hierarchy shared by every stage of the pipeline."""


class AmeCamError(Exception):
    """Base class for all errors raised by this package."""


# data ingestion
class MissingFile(AmeCamError, FileNotFoundError):
    pass


class CorruptHeader(AmeCamError):
    pass


class ShapeMismatch(AmeCamError, ValueError):
    pass


class NonFiniteVoxels(AmeCamError, ValueError):
    pass


class MissingMask(AmeCamError):
    pass


class BadDimensions(AmeCamError, ValueError):
    pass


class EmptyCaseList(AmeCamError, ValueError):
    pass


class SplitInfeasible(AmeCamError, ValueError):
    pass


# network and losses
class NonFiniteActivation(AmeCamError, FloatingPointError):
    pass


class NoPositivePair(AmeCamError, ValueError):
    pass


class UnnormalizedEmbedding(AmeCamError, ValueError):
    pass


class BatchTooSmall(AmeCamError, ValueError):
    pass


# activation maps
class ChannelMismatch(AmeCamError, ValueError):
    pass


class NonFiniteInput(AmeCamError, ValueError):
    pass


class BadTargetSize(AmeCamError, ValueError):
    pass


class EmptyList(AmeCamError, ValueError):
    pass


class MixedResolutions(AmeCamError, ValueError):
    pass


class ResolutionMismatch(AmeCamError, ValueError):
    pass


class GradientUnavailable(AmeCamError, RuntimeError):
    pass


# training
class BadStep(AmeCamError, ValueError):
    pass


class SamplerInfeasible(AmeCamError, ValueError):
    pass


class IncompatibleCheckpoint(AmeCamError, ValueError):
    pass


# evaluation
class BadThreshold(AmeCamError, ValueError):
    pass


class EmptyGroundTruth(AmeCamError, ValueError):
    pass


class EmptyMask(AmeCamError, ValueError):
    pass


class NoEvaluableSamples(AmeCamError, ValueError):
    pass


class UnwritablePath(AmeCamError, OSError):
    pass
