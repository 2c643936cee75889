"""Exception hierarchy shared across the package."""


class Q4FGError(Exception):
    """Base class for all q4fg errors."""


class DimensionError(Q4FGError, ValueError):
    """Operand shapes are incompatible."""


class RangeError(Q4FGError, ValueError):
    """A value lies outside the representable range of the target format."""


class SchemeMisuseError(Q4FGError, ValueError):
    """A quantization scheme was applied to a tensor it does not fit."""


class TrainingError(Q4FGError, RuntimeError):
    """Non-finite values or invalid state during optimization."""


class ConfigError(Q4FGError, ValueError):
    """Invalid model, training or strategy configuration."""


class ContainerError(Q4FGError, ValueError):
    """Malformed or incompatible model container."""
