"""Multimodal conversation emotion recognition on a small numpy autodiff engine."""
from .config import RunConfig, SyntheticSpec
from .errors import ConfigError, ConvEmoError, DataError, NumericError

__version__ = "0.1.0"

__all__ = ["RunConfig", "SyntheticSpec", "ConfigError", "ConvEmoError", "DataError", "NumericError"]
