"""Select the coordinate-descent kernel at import time.

The compiled extension is used when it imports; ``GGREG_PURE_PYTHON=1``
forces the numpy implementation.
"""
import os

if os.environ.get("GGREG_PURE_PYTHON", "").strip() not in ("", "0"):
    from . import _sgl_py as kernel
else:
    try:
        from . import _sgl_core as kernel
    except ImportError:  # extension not built
        from . import _sgl_py as kernel

BACKEND = kernel.BACKEND
solve = kernel.solve

__all__ = ["BACKEND", "solve", "kernel"]
