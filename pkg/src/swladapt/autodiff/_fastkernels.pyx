# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled gather/scatter kernels for 1-D convolution.

Padding is handled by index arithmetic rather than a padded temporary, which
is the main win over the numpy fallback. ``col2im`` accumulates in ascending
kernel-tap order so results are bit-identical to ``_numpykernels``.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double


def im2col(real[:, :, ::1] x, Py_ssize_t kernel, Py_ssize_t stride,
           Py_ssize_t pad_left, Py_ssize_t pad_right):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t channels = x.shape[1]
    cdef Py_ssize_t length = x.shape[2]
    cdef Py_ssize_t out_len = (length + pad_left + pad_right - kernel) // stride + 1
    if real is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out_arr = np.zeros((n, out_len, channels * kernel), dtype=dtype)
    cdef real[:, :, ::1] out = out_arr
    cdef Py_ssize_t i, j, c, t, src, base
    with nogil:
        for i in range(n):
            for j in range(out_len):
                base = j * stride - pad_left
                for c in range(channels):
                    for t in range(kernel):
                        src = base + t
                        if 0 <= src < length:
                            out[i, j, c * kernel + t] = x[i, c, src]
    return out_arr


def col2im(real[:, :, ::1] cols, Py_ssize_t kernel, Py_ssize_t stride,
           Py_ssize_t pad_left, Py_ssize_t pad_right, Py_ssize_t length):
    cdef Py_ssize_t n = cols.shape[0]
    cdef Py_ssize_t out_len = cols.shape[1]
    cdef Py_ssize_t channels = cols.shape[2] // kernel
    if real is float:
        dtype = np.float32
    else:
        dtype = np.float64
    dx_arr = np.zeros((n, channels, length), dtype=dtype)
    cdef real[:, :, ::1] dx = dx_arr
    cdef Py_ssize_t i, j, c, t, src
    with nogil:
        for i in range(n):
            for t in range(kernel):
                for c in range(channels):
                    for j in range(out_len):
                        src = j * stride - pad_left + t
                        if 0 <= src < length:
                            dx[i, c, src] += cols[i, j, c * kernel + t]
    return dx_arr
