"""Backend selection for the convolution patch kernels.

The compiled extension is used when it was built; otherwise the numpy
fallback is loaded. Set ``SEMLINK_PURE_PYTHON=1`` to force the fallback.
"""
import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("SEMLINK_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"


def _native(arr):
    return np.ascontiguousarray(arr) if arr.dtype in (np.float32, np.float64) else arr.astype(np.float64)


def im2col(xp, k, stride, ho, wo):
    """Gather ``k x k`` patches of a padded NHWC buffer into ``(N, Ho, Wo, k, k, C)``."""
    return _impl.im2col(_native(xp), int(k), int(stride), int(ho), int(wo))


def col2im(cols, hp, wp, stride):
    """Scatter-add patch gradients back onto a padded ``(N, hp, wp, C)`` buffer."""
    return _impl.col2im(_native(cols), int(hp), int(wp), int(stride))


def use_backend(name):
    """Switch between ``"cython"`` and ``"python"``; used by the benchmark and tests."""
    global _impl, BACKEND
    if name == "python":
        _impl, BACKEND = _kernels_py, "python"
    elif name == "cython":
        from . import _kernels as _compiled

        _impl, BACKEND = _compiled, "cython"
    else:
        raise ValueError(f"unknown backend {name!r}")
