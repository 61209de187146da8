"""Exception types shared across the package."""


class GroundNavError(Exception):
    """Base class for all package-specific errors."""


class MalformedResponse(GroundNavError):
    """Raised when answer text does not follow the structured-token grammar."""


class InvariantViolation(GroundNavError):
    """Raised when a structured response violates its own invariants."""


class BadMaskShape(GroundNavError):
    """Raised for mask arrays with the wrong number of channels or dims."""


class ShapeMismatch(GroundNavError):
    """Raised when two arrays that must share a shape do not."""


class NoFeatures(GroundNavError):
    """Raised when a frame contains no non-background class to describe."""


class GeneratorUnavailable(GroundNavError):
    """Raised when the external question generator cannot be reached."""


class BadGridShape(GroundNavError):
    """Raised for feature grids whose sides are not divisible by 4."""


class BadImageShape(GroundNavError):
    """Raised when an image does not match the configured input size."""


class SequenceTooLong(GroundNavError):
    """Raised when a token sequence exceeds the configured maximum length."""


class DegenerateBatch(GroundNavError):
    """Raised when a batch carries no loss-bearing positions or anchors."""


class NonFiniteLoss(GroundNavError):
    """Raised when a loss component is NaN or infinite."""


class EmptyPromptBank(GroundNavError):
    """Raised when the mask decoder receives no valid prompt tokens."""


class EmptyInput(GroundNavError):
    """Raised when a metric is asked to aggregate over zero items."""
