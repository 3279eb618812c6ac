"""Exception types shared across the pipeline.

The CLI maps these onto exit codes: validation problems exit with 2,
numerical failures with 3.
"""


class SleepNetError(Exception):
    """Base class for all package errors."""


class ValidationError(SleepNetError, ValueError):
    """Input violates a documented invariant (bad labels, shapes, plans)."""


class FormatError(SleepNetError):
    """On-disk container is missing files or is malformed."""


class NumericalError(SleepNetError, ArithmeticError):
    """A computation produced non-finite values (loss, gradients, signals)."""
