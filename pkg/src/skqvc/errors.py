"""Exception hierarchy shared across the pipeline."""


class SKQVCError(Exception):
    """Base class for all pipeline errors."""


# audio / features
class UnreadableFile(SKQVCError):
    pass


class UnsupportedFormat(SKQVCError):
    pass


class EmptyAudio(SKQVCError):
    pass


class AudioTooShort(SKQVCError):
    pass


class InvalidConfig(SKQVCError):
    pass


class BadMagic(SKQVCError):
    pass


class NonFiniteValue(SKQVCError):
    pass


# shapes
class DimMismatch(SKQVCError):
    pass


class ShapeMismatch(SKQVCError):
    pass


class LengthMismatch(SKQVCError):
    pass


class EmptySequence(SKQVCError):
    pass


# codebook
class TooFewFrames(SKQVCError):
    pass


# training / conversion
class MisalignedPair(SKQVCError):
    pass


class NonFiniteLoss(SKQVCError):
    pass


class EmptyDataset(SKQVCError):
    pass


class IncompatibleCheckpoint(SKQVCError):
    pass


# evaluation
class InsufficientVoicedOverlap(SKQVCError):
    pass


class ZeroVector(SKQVCError):
    pass
