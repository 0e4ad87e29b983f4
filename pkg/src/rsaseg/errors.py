"""Exception types raised across the package.

Every structural or numeric precondition failure maps to one of these, so
callers can catch a single base class or the precise condition.
"""


class RsasegError(Exception):
    """Base class for all package errors."""


# tensor core

class ShapeMismatch(RsasegError):
    pass


class EmptyShape(RsasegError):
    pass


class InvalidPermutation(RsasegError):
    pass


class InnerDimMismatch(RsasegError):
    pass


class NonFiniteInput(RsasegError):
    pass


class NonFiniteResult(RsasegError):
    """An operation produced NaN/Inf while debug checks are enabled."""


class ChannelMismatch(RsasegError):
    pass


class ShapeUnderflow(RsasegError):
    pass


class NotScalar(RsasegError):
    pass


class TapeConsumed(RsasegError):
    """backward() was called twice on the same tape without a reset."""


class NonDeterministicFunction(RsasegError):
    pass


# attention

class RankMismatch(RsasegError):
    pass


class AttentionMapTooLarge(RsasegError):
    """Full-voxel attention would exceed the configured size guard."""


# cost model

class ZeroExtent(RsasegError):
    pass


# network / training

class InvalidPlacement(RsasegError):
    pass


class IndivisibleExtent(RsasegError):
    pass


class InvalidRate(RsasegError):
    pass


class IncompatibleCheckpoint(RsasegError):
    pass


# data

class RateUnreachable(RsasegError):
    pass


class CropTooLarge(RsasegError):
    pass


class InvalidSplit(RsasegError):
    pass


class BadMagic(RsasegError):
    pass


class UnsupportedVersion(RsasegError):
    pass


class TruncatedFile(RsasegError):
    pass


class ChecksumMismatch(RsasegError):
    pass


# metrics

class NonBinary(RsasegError):
    pass


class EmptyInput(RsasegError):
    pass
