"""Exception hierarchy shared by every stage of the pipeline."""


class SplatfitError(Exception):
    """Base class for all package errors."""


class BehindCamera(SplatfitError, ValueError):
    """A point cannot be projected because it lies behind the image plane."""


class NonPositiveDepth(SplatfitError, ValueError):
    pass


class DimensionMismatch(SplatfitError, ValueError):
    pass


class InvalidSpec(SplatfitError, ValueError):
    pass


class InvalidBundle(SplatfitError, ValueError):
    """A scene bundle directory is missing files or is malformed."""


class InsufficientViews(SplatfitError, ValueError):
    pass


class NonFiniteGradient(SplatfitError, FloatingPointError):
    def __init__(self, field: str, index: int):
        super().__init__(f"non-finite gradient in {field}[{index}]")
        self.field = field
        self.index = index


class EmptySurface(SplatfitError):
    pass


class EmptyPointSet(SplatfitError, ValueError):
    pass


class NoOverlap(SplatfitError, ValueError):
    pass
