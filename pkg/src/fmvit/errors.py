"""Exception types shared across the library.

Each maps to a distinct CLI exit code (see fmvit.cli).
"""


class FmvitError(Exception):
    """Base class for all library errors."""


class ShapeError(FmvitError):
    """Operand shapes or channel counts do not conform."""


class SpecError(FmvitError):
    """Invalid layer/block/model geometry (divisibility, parity, ranges)."""


class NumericError(FmvitError):
    """A public operation produced NaN or Inf."""


class TapeError(FmvitError):
    """Gradient tape misuse (loss not on tape, non-scalar loss)."""


class MergeError(FmvitError):
    """A branch bundle violates a mergeability condition; message names it."""


class SpecParseError(FmvitError):
    """Model-spec text is malformed; carries line/column position."""

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        loc = ""
        if line is not None:
            loc = f" (line {line}" + (f", column {column}" if column is not None else "") + ")"
        super().__init__(message + loc)


class WeightFormatError(FmvitError):
    """Weight file is corrupt: bad magic, CRC mismatch, or dims/payload clash."""


class VerificationError(FmvitError):
    """Equivalence verification exceeded tolerance."""


class TrainingDiverged(FmvitError):
    """Training loss became non-finite."""
