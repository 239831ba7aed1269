"""Interleaved convolution / self-attention encoder with a minimal autodiff core."""

__version__ = "0.1.0"

from .errors import ConfigError, ConvAttnError, DataError, DivergenceError, ShapeError
from .tensor import Tensor

__all__ = [
    "Tensor",
    "ConvAttnError",
    "ConfigError",
    "DataError",
    "DivergenceError",
    "ShapeError",
    "__version__",
]
