"""Exception types raised across the package."""


class MstDecodeError(Exception):
    """Base class for all package errors."""


class DegenerateBackground(MstDecodeError, ValueError):
    """Background segment has (near) zero standard deviation."""


class FormatError(MstDecodeError, ValueError):
    """A binary file has the wrong magic bytes, version or layout."""


class TruncatedFile(FormatError):
    """A binary file ended before its declared payload."""


class EmptyRange(MstDecodeError, ValueError):
    """A frequency crop kept no bins."""


class ShapeMismatch(MstDecodeError, ValueError):
    """An array does not have the shape a layer expects."""

    def __init__(self, what: str, expected, actual):
        self.expected = tuple(expected)
        self.actual = tuple(actual)
        super().__init__(f"{what}: expected shape {self.expected}, got {self.actual}")


class UnsupportedAxis(MstDecodeError, ValueError):
    """Unknown filter axis for the encoder's first convolution."""


class TooFewTrials(MstDecodeError, ValueError):
    """A class has fewer trials than cross-validation folds."""


class InvalidConfig(MstDecodeError, ValueError):
    """A configuration object violates its invariants."""
