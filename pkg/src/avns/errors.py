"""Exception hierarchy shared across the package."""


class AvnsError(Exception):
    """Base class for all library errors."""


class InvalidInput(AvnsError):
    """Input data violates a precondition (empty, non-finite, wrong length...)."""


class InvalidMask(AvnsError):
    """Mask values fall outside [0, 1]."""


class InvalidReference(AvnsError):
    """Reference signal has zero energy."""


class ShapeError(AvnsError):
    """Tensor shape incompatible with the layer or operation."""


class ConfigError(AvnsError):
    """Configuration values are inconsistent or unknown."""


class FormatError(AvnsError):
    """A binary or text file does not match its documented format."""


class InitError(AvnsError):
    """Checkpoint-based initialization failed (missing/incompatible tensors)."""


class MissingHead(AvnsError):
    """The checkpoint lacks the head required by the requested metric."""


class NumericError(AvnsError):
    """Non-finite value encountered during optimization."""
