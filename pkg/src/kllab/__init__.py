"""Numerical laboratory for the Kurdyka-Lojasiewicz inequality in the plane."""

from .errors import KLError
from .zoo import ScalarField, make_field

__version__ = "0.1.0"

__all__ = ["KLError", "ScalarField", "make_field", "__version__"]
