"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateInputError(ValueError):
    """Input has no usable direction (zero norm, coincident points, ...)."""


class ContractError(RuntimeError):
    """An operation was invoked outside its declared preconditions."""


class NumericAbort(ArithmeticError):
    """A non-finite value appeared where training cannot continue."""

    def __init__(self, message, tensor_name=None, step=None):
        super().__init__(message)
        self.tensor_name = tensor_name
        self.step = step


class EmptyInputError(ValueError):
    """An aggregate was requested over nothing."""


class FormatError(ValueError):
    """A file on disk does not match the expected binary or text layout."""
