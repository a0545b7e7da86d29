"""Hot-kernel dispatch: the compiled extension when importable, else pure Python.

Set ``PPG_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("PPG_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py

assign_max = _impl.assign_max
pairwise_iou = _impl.pairwise_iou
sample_categorical = _impl.sample_categorical
union_area = _impl.union_area


def fill_boxes(raster, boxes, value=1):
    if BACKEND == "cython" and raster.dtype.name == "uint8" and raster.flags.c_contiguous:
        return _impl.fill_boxes(raster, boxes, value)
    return _kernels_py.fill_boxes(raster, boxes, value)


__all__ = ["BACKEND", "assign_max", "pairwise_iou", "sample_categorical", "union_area", "fill_boxes"]
