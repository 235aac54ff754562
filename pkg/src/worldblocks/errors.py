"""Exception hierarchy shared by all modules.

The CLI maps these onto process exit codes, so new error types should
subclass one of the four categories below rather than Exception.
"""


class WorldBlocksError(Exception):
    """Base class for all library errors."""


class ConfigError(WorldBlocksError):
    """Invalid configuration, usage, or precondition violation."""


class ShapeError(ConfigError):
    """Array/table dimensions inconsistent with the model."""


class DataError(WorldBlocksError):
    """Bad input data: out-of-alphabet symbols, non-finite values, empty sets."""


class NumericalError(WorldBlocksError):
    """Numerical failure: non-PD matrix, diverging ELBO, non-finite estimate."""


class VersionError(WorldBlocksError):
    """Archive format version not supported."""


class GrowthStallError(WorldBlocksError):
    """Structure growth made no compression progress at a level."""
