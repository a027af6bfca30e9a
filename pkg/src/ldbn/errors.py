"""Exception hierarchy shared by every module of the package."""


class LDBNError(Exception):
    """Base class for all errors raised by ldbn."""


class DimensionError(LDBNError, ValueError):
    """Tensor shapes do not chain or do not match an operation's contract."""


class StateError(LDBNError, RuntimeError):
    """An operation was called in a state that does not allow it."""


class NumericError(LDBNError, ArithmeticError):
    """Non-finite values were produced or supplied."""


class DegenerateBatchError(LDBNError, ValueError):
    """Batch statistics cannot be computed from fewer than two samples per channel."""


class ValidationError(LDBNError, ValueError):
    """An argument lies outside its documented domain."""


class FormatError(LDBNError):
    """A binary container could not be parsed.

    ``offset`` is the byte position where parsing failed and ``record`` the
    zero-based record index, when one applies.
    """

    def __init__(self, message, offset=None, record=None):
        parts = [message]
        if record is not None:
            parts.append(f"record {record}")
        if offset is not None:
            parts.append(f"byte offset {offset}")
        super().__init__(" at ".join(parts) if len(parts) > 1 else message)
        self.offset = offset
        self.record = record
