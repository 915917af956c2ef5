"""Rotated-box kernels with a compiled core and a pure-Python fallback.

The compiled module is used when it imports; set ``COOPDET_PURE_PYTHON=1``
to force the fallback. ``BACKEND`` names the active implementation.
"""

import os

from . import _pykernels as py_impl

try:
    from . import _ckernels as c_impl
except ImportError:  # extension not built
    c_impl = None

if c_impl is not None and not os.environ.get("COOPDET_PURE_PYTHON"):
    _impl = c_impl
    BACKEND = "cython"
else:
    _impl = py_impl
    BACKEND = "python"

iou_matrix = _impl.iou_matrix
intersection_matrix = _impl.intersection_matrix
nms_keep = _impl.nms_keep

__all__ = ["BACKEND", "c_impl", "py_impl", "iou_matrix", "intersection_matrix", "nms_keep"]
