"""Exception hierarchy.

Every error raised by the toolkit derives from :class:`JacboundError`.  The CLI
maps :class:`ValidationError` to exit code 1 and :class:`NumericError` to exit
code 2.
"""


class JacboundError(Exception):
    code = "error"


class ValidationError(JacboundError, ValueError):
    """Input failed a precondition."""

    code = "validation"


class NumericError(JacboundError, ArithmeticError):
    """A numerical procedure could not produce a trustworthy value."""

    code = "numeric"


class RejectedInputError(ValidationError):
    code = "rejected_input"


class DegenerateInputError(ValidationError):
    code = "degenerate_input"


class DimensionMismatchError(ValidationError):
    code = "dimension_mismatch"


class StructureError(ValidationError):
    code = "structure"


class InfeasibleError(ValidationError):
    code = "infeasible"


class SizeError(ValidationError):
    code = "size"


class ConvergenceError(NumericError):
    code = "convergence"


class DivergenceError(NumericError):
    """Training produced a non-finite loss; ``state`` holds the last finite net."""

    code = "divergence"

    def __init__(self, message, state=None, history=None):
        super().__init__(message)
        self.state = state
        self.history = history


class ArchiveError(ValidationError):
    code = "archive"


class BadMagicError(ArchiveError):
    code = "bad_magic"


class TruncatedPayloadError(ArchiveError):
    code = "truncated_payload"


class OverlappingOffsetsError(ArchiveError):
    code = "overlapping_offsets"


class NonFinitePayloadError(ArchiveError):
    code = "non_finite_payload"


class EmptyArchiveError(ArchiveError):
    code = "empty_archive"


class DatasetFormatError(ValidationError):
    code = "dataset_format"
