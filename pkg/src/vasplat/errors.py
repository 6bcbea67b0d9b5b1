"""Exception types raised across the package."""


class VasplatError(Exception):
    """Base class for all errors raised by vasplat."""


# geometry
class NonPositiveDepth(VasplatError, ValueError):
    pass


class DegeneratePlane(VasplatError, ValueError):
    pass


class PointAtInfinity(VasplatError, ValueError):
    pass


class InvalidCamera(VasplatError, ValueError):
    pass


# gaussians
class ZeroQuaternion(VasplatError, ValueError):
    pass


class RayParallelToPlane(VasplatError, ValueError):
    pass


class EmptyPointSet(VasplatError, ValueError):
    pass


# rasterizer
class Culled(VasplatError):
    """The primitive is behind the near plane or entirely off-screen."""


class MissingContributorRecords(VasplatError, RuntimeError):
    pass


# image processing / features / losses
class ShapeMismatch(VasplatError, ValueError):
    pass


class OutOfBounds(VasplatError, IndexError):
    pass


class BadHeader(VasplatError, ValueError):
    pass


class ChannelMismatch(VasplatError, ValueError):
    pass


class NoSourceViews(VasplatError, ValueError):
    pass


class InvalidNeighborhood(VasplatError, ValueError):
    pass


# trainer
class TooFewViews(VasplatError, ValueError):
    pass


class NonFiniteGradient(VasplatError, FloatingPointError):
    pass


class TrainingAborted(VasplatError, RuntimeError):
    pass


# fusion / metrics
class EmptyVolume(VasplatError, ValueError):
    pass


class IoFailure(VasplatError, OSError):
    pass


class EmptySet(VasplatError, ValueError):
    pass


# scenes
class BadConfig(VasplatError, ValueError):
    pass


class MissingCameras(VasplatError, FileNotFoundError):
    pass


class ResolutionMismatch(VasplatError, ValueError):
    pass


class BadJson(VasplatError, ValueError):
    pass
