"""Segmentation with a learned logit-compensation matrix, on synthetic grids."""
from .errors import CompsegError, ConfigError, DataError, DimensionError, NumericError, UndefinedMetricError

__version__ = "0.1.0"
