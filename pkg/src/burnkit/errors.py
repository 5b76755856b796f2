"""Exception types shared across burnkit."""


class BurnkitError(Exception):
    """Base class for all burnkit errors."""


class DimensionError(BurnkitError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(BurnkitError, ValueError):
    """A documented precondition was violated."""


class FormatError(BurnkitError, ValueError):
    """A binary file does not match its declared format."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class LoadError(BurnkitError, KeyError):
    """A checkpoint is missing a tensor or carries one with the wrong shape."""

    def __init__(self, message: str, tensor_name: str):
        super().__init__(message)
        self.tensor_name = tensor_name

    def __str__(self) -> str:
        return self.args[0]


class DataError(BurnkitError, ValueError):
    """Dataset contents violate an expectation (e.g. label out of range)."""


class NumericAbort(BurnkitError, FloatingPointError):
    """Training produced a non-finite value; carries the name of the first offender."""

    def __init__(self, message: str, tensor_name: str):
        super().__init__(message)
        self.tensor_name = tensor_name


class ConfigError(BurnkitError, ValueError):
    """A configuration file or command-line option is invalid."""
