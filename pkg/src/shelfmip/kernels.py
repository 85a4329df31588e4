"""Kernel backend selection.

The compiled extension is used when importable; the numpy fallback
otherwise.  ``SHELFMIP_PURE_PYTHON=1`` forces the fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
PolyRows = _kernels_py.PolyRows
rect_penetration = _kernels_py.rect_penetration

if os.environ.get("SHELFMIP_PURE_PYTHON", "0") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None
    if _compiled is not None:
        BACKEND = "cython"
        PolyRows = _compiled.PolyRows
        rect_penetration = _compiled.rect_penetration

__all__ = ["BACKEND", "PolyRows", "rect_penetration"]
