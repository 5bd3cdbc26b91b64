"""Desk-scale hybrid linear/softmax attention: reference forms, model, cost and alignment tools."""
from ._kernels import BACKEND
from .numerics import ConfigError, NonFiniteError, PrecisionMode, ShapeError

__version__ = "0.1.0"

__all__ = ["BACKEND", "ConfigError", "NonFiniteError", "PrecisionMode", "ShapeError", "__version__"]
