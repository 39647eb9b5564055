"""Exception hierarchy shared across the package.

Two top-level families matter to callers: ``ValidationFailure`` for bad
inputs or violated preconditions (CLI exit code 3) and ``SolverFailure``
for numerical breakdowns (CLI exit code 4).
"""


class LineTensionError(Exception):
    """Base class for all package errors."""


class ValidationFailure(LineTensionError):
    """Input data or precondition violated."""


class SolverFailure(LineTensionError):
    """A numerical solve did not converge or produced non-finite values."""


class DegenerateProjectionError(SolverFailure):
    """Nearest-rotation projection is non-unique for this matrix."""


class AssumptionViolationError(ValidationFailure):
    """An energy-model assumption failed; message names the clause."""


class OnSegmentError(ValidationFailure):
    """Field evaluation requested on the singular support itself."""
