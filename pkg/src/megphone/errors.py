"""Exception hierarchy shared across the package."""


class MegphoneError(Exception):
    """Base class for all package errors."""


class DimensionError(MegphoneError, ValueError):
    pass


class ConfigurationError(MegphoneError, ValueError):
    pass


class InputError(MegphoneError, ValueError):
    pass


class UsageError(MegphoneError, RuntimeError):
    pass


class ParseError(MegphoneError, ValueError):
    """Malformed on-disk data. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class VocabularyError(MegphoneError, ValueError):
    pass


class PairingError(MegphoneError, ValueError):
    pass


class LoadError(MegphoneError):
    pass


class NumericFault(MegphoneError, ArithmeticError):
    pass


class TrainingDiverged(NumericFault):
    """Raised when the training loss becomes non-finite.

    The best checkpoint seen so far and the partial log are attached so the
    caller can still persist them.
    """

    def __init__(self, message, model=None, log=None):
        super().__init__(message)
        self.model = model
        self.log = log
