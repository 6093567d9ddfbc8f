"""Exception types shared across the codec.

Every error raised on a user-facing path derives from CodecError so callers
can catch one base class. DecodeError carries the byte offset at which a
stream became unreadable.
"""


class CodecError(Exception):
    pass


class EmptyCloud(CodecError):
    """An operation received a point cloud with zero points."""


class CoordOutOfRange(CodecError):
    """A coordinate does not fit the declared bit depth or grid."""


class DuplicatePoints(CodecError):
    """Coordinates expected to be unique contain repeats."""


class EmptyReference(CodecError):
    """A reference cloud or level with zero points was supplied."""


class AdjacencyMismatch(CodecError):
    """A neighbor table does not match the cloud it is used with."""


class ScanOrderError(CodecError):
    """Points were supplied out of the required Morton scan order."""


class InsufficientCandidates(CodecError):
    """Fewer candidate points exist than the requested output count."""


class SchedulingError(CodecError):
    """A group-of-frames plan is malformed or an argument is unsupported."""


class NoOverlap(CodecError):
    """Two rate-distortion curves share no quality range."""


class NonFinite(CodecError):
    """A computation produced NaN or infinity where finite values are required."""


class TrainingDiverged(CodecError):
    """The optimizer produced a non-finite loss."""


class DecodeError(CodecError):
    """A bitstream is truncated or corrupt.

    Attributes:
        offset: byte position at which the problem was detected, or None.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset
