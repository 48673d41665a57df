"""Time-frequency fusion contrastive learning for multichannel EEG windows."""

__version__ = "0.1.0"

from tfmcl.errors import (
    DatasetError,
    DegenerateInputError,
    InvalidArgumentError,
    NumericError,
    TFMCLError,
)

__all__ = [
    "DatasetError",
    "DegenerateInputError",
    "InvalidArgumentError",
    "NumericError",
    "TFMCLError",
    "__version__",
]
