"""Paired mask/image generation with two mutually guided diffusion models."""

__version__ = "0.1.0"

from .errors import ConfigError, ContractError, FormatError, NumericError, PairdiffError, UsageError
from .rng import Rng

__all__ = ["ConfigError", "ContractError", "FormatError", "NumericError", "PairdiffError", "Rng", "UsageError",
           "__version__"]
