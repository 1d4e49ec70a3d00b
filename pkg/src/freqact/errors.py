"""Exception hierarchy shared across the package.

The CLI maps these onto stable exit codes (see ``freqact.cli``).
"""


class FreqActError(Exception):
    """Base class for all package errors."""


class DomainError(FreqActError, ValueError):
    """Input values outside the mathematical domain (NaN, Inf, bad scale)."""


class RangeError(FreqActError, ValueError):
    """An integer or real argument is outside its allowed range."""


class ShapeError(FreqActError, ValueError):
    """Array shapes are incompatible with an operator."""

    def __init__(self, op, *shapes, detail=""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes {', '.join(str(tuple(s)) for s in shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class ConfigError(FreqActError):
    """Invalid, unknown, or conflicting configuration keys."""


class DataError(FreqActError):
    """A dataset, checkpoint, or CSV file could not be parsed."""


class NumericError(FreqActError):
    """NaN or Inf produced during a numerical computation."""
