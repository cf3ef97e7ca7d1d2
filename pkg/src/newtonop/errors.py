"""Exception hierarchy shared across the package and mapped to CLI exit codes."""


class NewtonOpError(Exception):
    """Base class for all package errors."""


class ConfigError(NewtonOpError, ValueError):
    """Bad configuration: unknown key, malformed value, invalid preset."""


class GridMismatchError(NewtonOpError, ValueError):
    pass


class NumericalError(NewtonOpError, ArithmeticError):
    """Singular systems, divergence, or non-finite values."""


class SingularJacobianError(NumericalError):
    pass


class TrainingDivergedError(NumericalError):
    def __init__(self, message, last_good=None, history=None):
        super().__init__(message)
        self.last_good = last_good
        self.history = history


class FormatError(NewtonOpError, OSError):
    """Base class for binary file format problems."""


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass
