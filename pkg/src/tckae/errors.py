"""Exception hierarchy. The CLI maps these onto exit codes."""


class TckaeError(Exception):
    """Base class for all package errors."""


class DataFormatError(TckaeError, ValueError):
    """Malformed input file or inconsistent dataset contents."""


class NumericalError(TckaeError, ArithmeticError):
    """A fit or training loop produced non-finite or degenerate values."""


class TckFitError(NumericalError):
    """An ensemble member failed to fit.

    ``member`` carries the index of the failing member so the caller can report it.
    """

    def __init__(self, message, member=None):
        super().__init__(message)
        self.member = member
