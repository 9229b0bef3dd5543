"""Kernel dispatch: compiled extension when available, pure Python otherwise.

Set ``UNIPERCEPT_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
if os.environ.get("UNIPERCEPT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
else:
    _impl = _kernels_py

rle_encode = _impl.rle_encode
rle_decode = _impl.rle_decode
rle_area = _impl.rle_area
rle_intersection = _impl.rle_intersection
linear_assignment = _impl.linear_assignment

__all__ = [
    "BACKEND",
    "rle_encode",
    "rle_decode",
    "rle_area",
    "rle_intersection",
    "linear_assignment",
]
