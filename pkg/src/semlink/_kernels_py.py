"""Pure-numpy fallback for the compiled patch kernels."""
import numpy as np
from numpy.lib.stride_tricks import as_strided


def im2col(xp, k, stride, ho, wo):
    xp = np.ascontiguousarray(xp)
    n, _, _, c = xp.shape
    sn, sh, sw, sc = xp.strides
    view = as_strided(
        xp,
        shape=(n, ho, wo, k, k, c),
        strides=(sn, sh * stride, sw * stride, sh, sw, sc),
        writeable=False,
    )
    return np.ascontiguousarray(view)


def col2im(cols, hp, wp, stride):
    n, ho, wo, k, _, c = cols.shape
    out = np.zeros((n, hp, wp, c), dtype=cols.dtype)
    # k*k strided slice-adds; each one is a dense vectorized update
    for a in range(k):
        rows = slice(a, a + stride * (ho - 1) + 1, stride)
        for b in range(k):
            out[:, rows, b:b + stride * (wo - 1) + 1:stride, :] += cols[:, :, :, a, b, :]
    return out
