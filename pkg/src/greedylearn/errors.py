"""Exception types shared across the package.

Validation-style errors double as ValueError so they play nicely with
callers (and scikit-learn tooling) that catch ValueError.
"""


class GreedylearnError(Exception):
    """Base class for all package-specific errors."""


class ShapeMismatch(GreedylearnError, ValueError):
    """Operand dimensions are incompatible."""


class NotPositiveDefinite(GreedylearnError, ArithmeticError):
    """A Cholesky pivot fell at or below the tolerance (1e-12)."""


class RankDeficientSupport(GreedylearnError, ArithmeticError):
    """A least-squares system over the selected atoms is singular."""


class AllZeroInput(GreedylearnError, ValueError):
    """An operation that needs a nonzero input received all zeros."""


class TapeMissing(GreedylearnError, ValueError):
    """A backward pass was requested without a recorded tape."""


class ZeroAtom(GreedylearnError, ValueError):
    """A dictionary contains a zero column."""


class EmptyBatch(GreedylearnError, ValueError):
    """A batch operation received no signals."""


class UnknownMethod(GreedylearnError, ValueError):
    """An evaluation method name is not recognized."""


class ImageTooSmall(GreedylearnError, ValueError):
    """An image is smaller than the requested patch size."""


class UnsupportedFormat(GreedylearnError, ValueError):
    """An image file is not 8-bit binary PGM (P5, maxval 255)."""


class CorruptHeader(GreedylearnError, ValueError):
    """A serialized artifact has a malformed or inconsistent header."""
