"""Exception types raised across the package."""


class IEKDError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(IEKDError, ValueError):
    pass


class NonScalarLoss(IEKDError, ValueError):
    pass


class DegenerateBatch(IEKDError, ValueError):
    pass


class LabelOutOfRange(IEKDError, ValueError):
    pass


class InvalidConfig(IEKDError, ValueError):
    pass


class ConfigMismatch(IEKDError, ValueError):
    """Codec / encoder channel counts do not fit the tapped feature blocks."""


class MissingGradient(IEKDError, RuntimeError):
    pass


class ZeroFeatureBlock(IEKDError, ValueError):
    pass


class ChannelNotDivisible(IEKDError, ValueError):
    pass


class IndexOutOfRange(IEKDError, IndexError):
    pass


class ZeroNormFactor(IEKDError, FloatingPointError):
    pass


class DegenerateRepresentation(IEKDError, ValueError):
    pass


class RowMismatch(IEKDError, ValueError):
    pass


class DegenerateGradient(IEKDError, ValueError):
    pass


class InvalidRecipe(IEKDError, ValueError):
    pass


class MalformedFile(IEKDError, ValueError):
    """Raised by the file readers; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class NumericFailure(IEKDError, FloatingPointError):
    """A NaN/inf guard tripped during training."""


class AlternationViolation(IEKDError, RuntimeError):
    """A peer network changed during the other network's IE-DML half-step."""
