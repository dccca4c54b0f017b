"""Exception hierarchy.

``UserError`` subclasses map to CLI exit code 1 (bad inputs, bad config);
anything else escaping a command maps to exit code 2.
"""


class SingFaceError(Exception):
    """Base class for every error raised by this package."""


class UserError(SingFaceError):
    pass


class InternalError(SingFaceError):
    pass


# audio
class UnreadableFile(UserError):
    pass


class UnsupportedFormat(UserError):
    pass


class WrongSampleRate(UserError):
    pass


class TooShort(UserError):
    pass


class EmptyTrack(UserError):
    pass


class SubjectOutOfRange(UserError):
    pass


# shapes and tasks
class ShapeMismatch(UserError):
    pass


class LengthMismatch(UserError):
    pass


class TaskMismatch(UserError):
    pass


class DurationMismatch(UserError):
    pass


# numerics
class NonFiniteGradient(InternalError):
    pass


class NonFiniteLoss(InternalError):
    pass


class DegenerateInput(UserError):
    pass


class EmptySet(UserError):
    pass


class MissingMask(UserError):
    pass


# data and files
class ConstantTrack(UserError):
    pass


class SequenceTooShort(UserError):
    pass


class MissingFile(UserError):
    pass


class SchemaViolation(UserError):
    pass


class InvalidConfig(UserError):
    pass


class CheckpointIncompatible(UserError):
    pass


class MissingTrack(UserError):
    pass


class MissingResult(UserError):
    pass
