"""Exception hierarchy.

Every error carries a short machine-readable ``code`` which the CLI prints as
``S2FL-ERR:<code>:<message>``.
"""


class S2FLError(Exception):
    code = "ERROR"

    def __init__(self, message, code=None):
        super().__init__(message)
        if code is not None:
            self.code = code


class DimensionError(S2FLError, ValueError):
    code = "DIMENSION"


class ValidationError(S2FLError, ValueError):
    code = "VALIDATION"


class FormatError(S2FLError, ValueError):
    """Malformed container, CSV or image payload."""

    code = "FORMAT"


class NumericalError(S2FLError, ArithmeticError):
    """A solver produced a non-finite intermediate."""

    code = "NUMERICAL"

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class StorageError(S2FLError, OSError):
    code = "IO"
