"""Mixed-integer bilinear optimization toolkit for the bookshelf insertion problem."""
from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
