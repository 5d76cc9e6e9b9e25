"""Exception types raised across the package."""

from __future__ import annotations


class SgrOccError(ValueError):
    """Base class for every error raised by sgrocc."""


class BehindCamera(SgrOccError):
    pass


class NonPositiveDepth(SgrOccError):
    pass


class DegenerateRay(SgrOccError):
    pass


class InvalidSpec(SgrOccError):
    pass


class CameraOutsideScene(SgrOccError):
    pass


class GridOutsideScene(SgrOccError):
    pass


class PathLeavesBounds(SgrOccError):
    pass


class FracOutOfRange(SgrOccError):
    pass


class BadPattern(SgrOccError):
    pass


class ResidualTooLarge(SgrOccError):
    pass


class OutOfView(SgrOccError):
    pass


class NoSurface(SgrOccError):
    pass


class NonUnitNormal(SgrOccError):
    pass


class PoolOverflow(SgrOccError):
    pass


class DimMismatch(SgrOccError):
    pass


class EpochOutOfRange(SgrOccError):
    pass


class Diverged(ArithmeticError):
    """Loss became NaN or infinite during training."""


class SpecMismatch(SgrOccError):
    pass


class ConfigError(SgrOccError):
    pass


class FormatError(SgrOccError):
    """A binary artifact failed to parse."""
