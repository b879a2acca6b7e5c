"""Thermal TeX decomposition, Pseudo-TeX HSV mapping and HSV radiance fields."""

from .errors import TexNerfError, TexNerfRuntimeError, ValidationError

__version__ = "0.1.0"

__all__ = ["TexNerfError", "TexNerfRuntimeError", "ValidationError", "__version__"]
