"""Exception types shared across the toolkit."""


class GunError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(GunError, ValueError):
    """Operands have incompatible or invalid shapes."""


class ConfigError(GunError, ValueError):
    """Invalid configuration value or unknown option."""


class MetricUndefinedError(GunError, ValueError):
    """A metric has no defined value, e.g. mIoU with no evaluated classes."""


class ContainerError(GunError, ValueError):
    """Malformed tensor container bytes."""


class BadMagicError(ContainerError):
    """Container does not start with the expected magic."""


class TruncatedError(ContainerError):
    """Container payload is shorter than the header promises."""


class UnsupportedDtypeError(ContainerError):
    """Container declares a dtype code this build does not support."""


class TrainingDivergedError(GunError, RuntimeError):
    """Loss became non-finite during training."""
