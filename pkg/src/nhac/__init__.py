"""Noise and hard frame aware clustering for unsupervised tracklet re-identification."""

from nhac.errors import InvalidConfigError, InvalidInputError, NonFiniteLossError

__version__ = "0.1.0"

__all__ = ["InvalidConfigError", "InvalidInputError", "NonFiniteLossError", "__version__"]
