"""Local feature masking: regularizer, training substrate, and evaluation harness."""

from .errors import (
    ConfigError,
    DataError,
    FormatError,
    InputError,
    LfmnetError,
    NumericError,
    StructuralError,
)
from .masking import LfmConfig, MaskDecision, MaskRect, lfm_apply
from .rng import RngStream

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "FormatError",
    "InputError",
    "LfmnetError",
    "NumericError",
    "StructuralError",
    "LfmConfig",
    "MaskDecision",
    "MaskRect",
    "lfm_apply",
    "RngStream",
    "__version__",
]
