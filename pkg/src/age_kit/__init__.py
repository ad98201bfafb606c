"""Attention-guided erasing for mammographic density classification."""

from age_kit.errors import AgeKitError, ConfigError, DataError

CLASSES = ("A", "B", "C", "D")

__version__ = "0.1.0"

__all__ = ["CLASSES", "AgeKitError", "ConfigError", "DataError", "__version__"]
