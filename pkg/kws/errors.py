"""Exception hierarchy shared by every pipeline stage.

``ValidationError`` covers bad input and violated preconditions (CLI exit 1),
``PipelineError`` covers failures while doing the work (CLI exit 2).
"""


class KwsError(Exception):
    """Base class for all keyword-spotting pipeline errors."""


class ValidationError(KwsError):
    pass


class PipelineError(KwsError):
    pass


# dataset
class MissingWordFolder(ValidationError):
    pass


class UnreadableAudio(ValidationError):
    pass


class InsufficientNoiseAudio(ValidationError):
    pass


class RatioUnachievable(ValidationError):
    pass


# dsp_frontend
class DecodeError(ValidationError):
    pass


class SampleRateMismatch(ValidationError):
    pass


# nn_core / model
class ShapeMismatch(ValidationError):
    pass


class ZeroVector(PipelineError):
    pass


# losses
class DegenerateBatch(ValidationError):
    pass


class InsufficientClassSamples(ValidationError):
    pass


# trainer
class Diverged(PipelineError):
    pass


class EmptySplit(ValidationError):
    pass


# backends
class MissingClass(ValidationError):
    pass


class NotConverged(PipelineError):
    pass


class DegenerateLabels(ValidationError):
    pass


# metrics_eval
class EmptyInput(ValidationError):
    pass


class ClassWithNoPositives(UserWarning):
    """A class had no positive clip and was left out of mAP."""


# cli
class ConfigError(ValidationError):
    pass


class MissingArtifact(PipelineError):
    pass


class NonFinite(PipelineError):
    """A forward op produced NaN/Inf from finite inputs (debug mode only)."""
