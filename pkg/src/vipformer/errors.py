"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ParameterError(ValueError):
    """A scalar or configuration argument is outside its valid range."""


class ContractError(RuntimeError):
    """An operation was invoked in a state that violates its preconditions."""


class FormatError(ValueError):
    """A file does not follow its documented byte layout."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DataError(ValueError):
    """Dataset contents are malformed or inconsistent."""


class NumericError(FloatingPointError):
    """A non-finite value appeared where a finite one is required."""

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good
