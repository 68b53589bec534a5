"""Two-stage cardiac MR segmentation on a tape-based numpy autograd core."""

from .errors import (
    CardiacSegError,
    ConfigError,
    CorruptionError,
    DimensionError,
    FormatError,
    NoHeartDetectedError,
    StateError,
    UndefinedMetricError,
    UsageError,
    ValidationError,
)
from .tensor import Parameter, Tape, Tensor, active_tape, backward, get_default_dtype, set_default_dtype

__version__ = "0.1.0"

__all__ = [
    "CardiacSegError",
    "ConfigError",
    "CorruptionError",
    "DimensionError",
    "FormatError",
    "NoHeartDetectedError",
    "Parameter",
    "StateError",
    "Tape",
    "Tensor",
    "UndefinedMetricError",
    "UsageError",
    "ValidationError",
    "active_tape",
    "backward",
    "get_default_dtype",
    "set_default_dtype",
    "__version__",
]
