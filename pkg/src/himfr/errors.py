"""Exception hierarchy shared by every stage."""


class HimfrError(Exception):
    pass


class ShapeError(HimfrError, ValueError):
    pass


class BoundsError(HimfrError, ValueError):
    pass


class GeometryError(HimfrError, ValueError):
    pass


class StratificationError(HimfrError, ValueError):
    pass


class ConfigurationError(HimfrError, ValueError):
    pass


class DataError(HimfrError, ValueError):
    """Bad or missing input data (files, labels, ground truth)."""


class TrainingError(HimfrError, RuntimeError):
    pass


class CheckpointError(HimfrError, RuntimeError):
    """Missing, corrupted, or incompatible checkpoint container."""
