"""Exception hierarchy shared by every peft_forge module."""


class PeftForgeError(Exception):
    """Base class for all library errors."""


class ShapeError(PeftForgeError, ValueError):
    pass


class NumericError(PeftForgeError, ArithmeticError):
    pass


class ContractError(PeftForgeError, ValueError):
    """A documented precondition of an operation was violated."""


class ConfigurationError(PeftForgeError, ValueError):
    pass


class ParseError(PeftForgeError, ValueError):
    """Malformed input file; the message carries the record/line position."""


class CorruptionError(PeftForgeError, IOError):
    pass


class CheckpointLoadError(PeftForgeError, IOError):
    pass


class GridError(PeftForgeError, RuntimeError):
    pass
