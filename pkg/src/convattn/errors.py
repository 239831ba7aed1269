"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: ConfigError -> 1, DataError -> 2,
DivergenceError -> 3.
"""


class ConvAttnError(Exception):
    pass


class ShapeError(ConvAttnError, ValueError):
    """Tensor shapes incompatible with the requested operation."""


class ConfigError(ConvAttnError, ValueError):
    """Invalid configuration value or malformed config file."""


class DataError(ConvAttnError, ValueError):
    """Malformed dataset file or inconsistent labels."""


class DivergenceError(ConvAttnError, RuntimeError):
    """Non-finite loss or gradient encountered during training."""
