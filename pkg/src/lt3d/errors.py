"""Exception hierarchy shared by every lt3d module."""


class Lt3dError(Exception):
    """Base class for all engine errors."""


class DimensionError(Lt3dError, ValueError):
    """Shapes, extents or geometry do not fit the operation."""


class DomainError(Lt3dError, ValueError):
    """A value lies outside the mathematical domain of an operation."""


class ContractError(Lt3dError, ValueError):
    """A caller violated an operation precondition."""


class ResourceError(Lt3dError, MemoryError):
    """An operation would exceed its configured materialization budget."""


class NumericError(Lt3dError, FloatingPointError):
    """A forward value became NaN or infinite."""


class UndefinedMetricError(Lt3dError, ValueError):
    """A metric is undefined for the given inputs (e.g. an empty mask)."""


class ConfigError(Lt3dError, ValueError):
    """Invalid or unreadable run configuration."""


class DataError(Lt3dError, OSError):
    """A dataset, manifest or volume could not be resolved."""


class FormatError(DataError):
    """A binary file is malformed. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
