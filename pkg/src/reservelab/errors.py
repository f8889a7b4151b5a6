"""Exception hierarchy for reservelab.

All library-specific failures derive from :class:`ReserveLabError` so callers
(and the CLI) can catch one base class. Plain ``ValueError`` is still used for
ordinary argument mistakes (wrong shapes, invalid options).
"""


class ReserveLabError(Exception):
    """Base class for all reservelab errors."""


class TriangleFormatError(ReserveLabError):
    """Raised when a triangle file cannot be parsed.

    Carries the 1-based row/column location of the offending entry when one
    can be identified (``row``/``column`` may be ``None`` for file-level
    problems such as an empty stream).
    """

    def __init__(self, message, row=None, column=None):
        self.row = row
        self.column = column
        loc = ""
        if row is not None:
            loc = f" (row {row}" + (f", column {column})" if column is not None else ")")
        super().__init__(message + loc)


class KindMismatchError(ReserveLabError):
    """Raised when an operation receives a triangle of the wrong kind."""


class SingularDesignError(ReserveLabError):
    """Raised when a design matrix is rank deficient or numerically singular."""


class ConvergenceError(ReserveLabError):
    """Raised when an iterative fit fails to converge.

    ``last_iterate`` holds the final coefficient vector for diagnosis.
    """

    def __init__(self, message, last_iterate=None):
        self.last_iterate = last_iterate
        super().__init__(message)


class DegenerateFitError(ReserveLabError):
    """Raised when fitted values make a statistic undefined (e.g. a Pearson
    residual with a zero fitted mean against a nonzero observation)."""


class IdentifiabilityError(ReserveLabError):
    """Raised when a model parameter cannot be identified from the data."""


class PredictionError(ReserveLabError):
    """Raised when a prediction request is inconsistent with a fitted model."""


class ExperimentError(ReserveLabError):
    """Raised when a replicated experiment exceeds its failure budget."""
