# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col/col2im for conv2d forward and backward."""
import numpy as np
cimport numpy as cnp
from libc.string cimport memcpy

cnp.import_array()


def im2col(const double[:, :, :, ::1] x, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h - kh) // stride + 1
    cdef Py_ssize_t ow = (w - kw) // stride + 1
    out_arr = np.empty((n, c * kh * kw, oh * ow), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t b, ch, i, j, r, oy, ox, col
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        r = (ch * kh + i) * kw + j
                        if stride == 1:
                            # each output row is a contiguous run of the input row
                            for oy in range(oh):
                                memcpy(&out[b, r, oy * ow], &x[b, ch, oy + i, j], ow * sizeof(double))
                            continue
                        col = 0
                        for oy in range(oh):
                            for ox in range(ow):
                                out[b, r, col] = x[b, ch, oy * stride + i, ox * stride + j]
                                col += 1
    return out_arr


def col2im(const double[:, :, ::1] cols, Py_ssize_t c, Py_ssize_t h, Py_ssize_t w,
           Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride):
    cdef Py_ssize_t n = cols.shape[0]
    cdef Py_ssize_t oh = (h - kh) // stride + 1
    cdef Py_ssize_t ow = (w - kw) // stride + 1
    out_arr = np.zeros((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, ch, i, j, r, oy, ox, col
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        r = (ch * kh + i) * kw + j
                        col = 0
                        for oy in range(oh):
                            for ox in range(ow):
                                out[b, ch, oy * stride + i, ox * stride + j] += cols[b, r, col]
                                col += 1
    return out_arr
