"""Exception types shared across the package."""


class ClusterGenError(Exception):
    """Base class for all package errors."""


class ShapeError(ClusterGenError):
    """Tensor or layer dimensions do not line up."""


class ConfigError(ClusterGenError):
    """A configuration value is out of range or inconsistent."""


class InputError(ClusterGenError):
    """Caller-supplied data violates a precondition."""


class ParseError(ClusterGenError):
    """A binary or text artifact could not be decoded.

    Carries the byte offset at which decoding failed when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class GenerationError(ClusterGenError):
    """Dataset synthesis could not satisfy its constraints."""


class NumericalError(ClusterGenError):
    """A non-finite value appeared where finite math was required."""
