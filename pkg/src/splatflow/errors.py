"""Exception taxonomy shared across modules (mapped to CLI exit codes)."""


class SplatflowError(Exception):
    """Base class for all package errors."""


class ValidationError(SplatflowError, ValueError):
    """A domain invariant or precondition was violated (exit code 1)."""


class FormatError(SplatflowError, ValueError):
    """A file did not match its declared on-disk format (exit code 1)."""


class NumericError(SplatflowError, ArithmeticError):
    """A non-finite value surfaced where finiteness is an invariant (exit code 2)."""


class BehindCameraError(SplatflowError, ValueError):
    """A point fell behind the near plane during strict projection."""
