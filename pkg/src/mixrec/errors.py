"""Exception types raised across the package."""


class MixrecError(Exception):
    """Base class for all library errors."""


class DegenerateInput(MixrecError, ValueError):
    pass


class DegenerateGeometry(MixrecError, ValueError):
    pass


class NonPositiveDepth(MixrecError, ValueError):
    pass


class BehindCamera(MixrecError, ValueError):
    pass


class EmptyCloud(MixrecError, ValueError):
    pass


class EmptyOverlap(MixrecError, ValueError):
    pass


class ShapeMismatch(MixrecError, ValueError):
    pass


class LayoutMismatch(MixrecError, ValueError):
    pass


class Infeasible(MixrecError, ValueError):
    pass


class ConfigMismatch(MixrecError, ValueError):
    pass


class EmptyDataset(MixrecError, ValueError):
    pass


class InvalidCount(MixrecError, ValueError):
    pass
