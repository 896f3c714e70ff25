"""Import-time selection of the compiled kernels.

``kernels`` is the Cython extension when it imports, else ``None``; the
accelerated backend registers compiled implementations only in the first
case, so a missing build degrades to reference fallbacks.  Setting
``VOXELKIT_PURE_PYTHON=1`` forces the fallback.
"""

import os

import numpy as np

kernels = None
if os.environ.get("VOXELKIT_PURE_PYTHON", "") in ("", "0"):
    try:
        from . import _kernels as kernels  # type: ignore[no-redef]
    except ImportError:
        kernels = None

HAVE_COMPILED = kernels is not None


def as3d(arr: np.ndarray) -> np.ndarray:
    """View an array of ndim <= 3 as 3-D by prepending unit axes."""
    if arr.ndim > 3:
        raise ValueError(f"compiled kernels support up to 3 axes, got {arr.ndim}")
    return arr.reshape((1,) * (3 - arr.ndim) + arr.shape)


def offsets3d(offsets: np.ndarray) -> np.ndarray:
    offsets = np.asarray(offsets, dtype=np.int64)
    pad = 3 - offsets.shape[1]
    return np.ascontiguousarray(np.pad(offsets, ((0, 0), (pad, 0))))


def axis_view(arr: np.ndarray, axis: int) -> np.ndarray:
    """Reshape a C-contiguous array to ``(outer, n, inner)`` around `axis`."""
    shape = arr.shape
    outer = int(np.prod(shape[:axis], dtype=np.int64))
    inner = int(np.prod(shape[axis + 1:], dtype=np.int64))
    return arr.reshape(outer, shape[axis], inner)
