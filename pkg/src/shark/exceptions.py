"""Exception types raised across the package."""


class SharkError(Exception):
    """Base class for all package errors."""


class ShapeError(SharkError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ConfigError(SharkError, ValueError):
    """A configuration value is outside its valid domain."""


class ValidationError(SharkError, ValueError):
    """Input data violates a value-range or finiteness contract."""


class UsageError(SharkError, RuntimeError):
    """An API was called in a state where it cannot run."""


class ImageReadError(SharkError, OSError):
    """An image file is missing, unreadable or has the wrong format."""


class CheckpointError(SharkError, ValueError):
    """A checkpoint file is corrupt, has the wrong version or does not match."""


class NonFiniteError(SharkError, FloatingPointError):
    """A NaN or Inf showed up in a loss, gradient or parameter."""
