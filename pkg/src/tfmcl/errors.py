"""Exception hierarchy shared by every module."""


class TFMCLError(Exception):
    """Base class; the CLI turns these into machine-readable error records."""

    kind = "error"


class InvalidArgumentError(TFMCLError, ValueError):
    kind = "invalid_argument"


class DegenerateInputError(InvalidArgumentError):
    """Raised for inputs where a quantity is undefined, e.g. a zero-norm vector."""

    kind = "degenerate_input"


class NumericError(TFMCLError, ArithmeticError):
    kind = "numeric"


class DatasetError(TFMCLError, ValueError):
    kind = "dataset"


class ConfigError(TFMCLError, ValueError):
    kind = "config"
