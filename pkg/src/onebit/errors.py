"""Exception types shared across the package."""


class OneBitError(Exception):
    """Base class for all errors raised by :mod:`onebit`."""


class InvalidArgument(OneBitError, ValueError):
    pass


class DegenerateInput(OneBitError, ValueError):
    """Input is well-formed but the operation is undefined on it (zero norm, zero column, ...)."""


class TooLarge(OneBitError, ValueError):
    pass


class InvalidState(OneBitError, RuntimeError):
    pass


class NumericalDivergence(OneBitError, ArithmeticError):
    """An iterate or loss became non-finite.

    ``payload`` carries whatever partial result the raiser wants to hand back,
    e.g. the last good checkpoint of a training run.
    """

    def __init__(self, message, payload=None):
        super().__init__(message)
        self.payload = payload


class LoadError(OneBitError, IOError):
    pass


class ConfigError(OneBitError, ValueError):
    def __init__(self, message, line=None, key=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
        self.key = key
