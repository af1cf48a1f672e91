"""Exception hierarchy shared by the library, the processes and the CLI.

Each error also derives from the closest builtin so callers that only know
about ``ValueError`` or ``ArithmeticError`` keep working.
"""

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class PPAPError(Exception):
    """Base class for every error raised by vivarium_ppap."""

    exit_code = EXIT_DATA


class UsageError(PPAPError, ValueError):
    """Bad flags, bad config values or a refused operation."""

    exit_code = EXIT_USAGE


class DataValidationError(PPAPError, ValueError):
    """Input data violates a documented precondition."""

    exit_code = EXIT_DATA


class ShapeError(DataValidationError):
    """Tensor or spectrogram shapes do not line up."""


class TooShortError(DataValidationError):
    """Audio clip shorter than one analysis window."""


class OutOfRangeError(DataValidationError):
    """A level, rating or key falls outside its table."""


class StaleCacheError(DataValidationError):
    """A masker cache was built with different weights."""


class NumericalError(PPAPError, ArithmeticError):
    """Non-finite values or a failed gradient check."""

    exit_code = EXIT_NUMERICAL


def exit_code_for(error):
    """Map an exception to the CLI exit code."""
    if isinstance(error, PPAPError):
        return error.exit_code
    if isinstance(error, FileNotFoundError):
        return EXIT_DATA
    return EXIT_USAGE
