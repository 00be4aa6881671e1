# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled patch-extraction kernels used by the convolution op.

Both functions work on zero-padded NHWC buffers and mirror
``semlink._kernels_py`` exactly.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.string cimport memcpy

cnp.import_array()


def im2col(floating[:, :, :, ::1] xp, int k, int stride, int ho, int wo):
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[3]
    cdef Py_ssize_t b, i, j, a, r0, c0
    cdef size_t run = k * c * sizeof(floating)
    dtype = np.float64 if floating is double else np.float32
    out = np.empty((n, ho, wo, k, k, c), dtype=dtype)
    cdef floating[:, :, :, :, :, ::1] cols = out
    if out.size == 0:
        return out
    with nogil:
        for b in range(n):
            for i in range(ho):
                r0 = i * stride
                for j in range(wo):
                    c0 = j * stride
                    # one patch row (k pixels x c channels) is contiguous in both buffers
                    for a in range(k):
                        memcpy(&cols[b, i, j, a, 0, 0], &xp[b, r0 + a, c0, 0], run)
    return out


def col2im(floating[:, :, :, :, :, ::1] cols, int hp, int wp, int stride):
    cdef Py_ssize_t n = cols.shape[0], ho = cols.shape[1], wo = cols.shape[2]
    cdef Py_ssize_t k = cols.shape[3], c = cols.shape[5]
    cdef Py_ssize_t b, i, j, a, bb, ch, r0, c0
    dtype = np.float64 if floating is double else np.float32
    out = np.zeros((n, hp, wp, c), dtype=dtype)
    cdef floating[:, :, :, ::1] xp = out
    with nogil:
        for b in range(n):
            for i in range(ho):
                r0 = i * stride
                for j in range(wo):
                    c0 = j * stride
                    for a in range(k):
                        for bb in range(k):
                            for ch in range(c):
                                xp[b, r0 + a, c0 + bb, ch] += cols[b, i, j, a, bb, ch]
    return out
