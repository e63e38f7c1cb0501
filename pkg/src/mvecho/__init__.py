"""Multi-view echocardiogram clip classification on a small autodiff engine."""

from mvecho.errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    NumericError,
)

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ConfigError",
    "ContractError",
    "DataError",
    "DimensionError",
    "NumericError",
    "__version__",
]
