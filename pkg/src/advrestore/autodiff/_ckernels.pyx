# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col / col2im kernels for 2-D convolution.

Columns use the (C*kh*kw, N*OH*OW) layout so a whole batch is one GEMM.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col(const double[:, :, :, ::1] x, Py_ssize_t kh, Py_ssize_t kw,
           Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((c, kh, kw, n, oh, ow), dtype=np.float64)
    cdef double[:, :, :, :, :, ::1] cols = out
    cdef Py_ssize_t b, ch, i, j, y, xx, iy, ix
    with nogil:
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    for b in range(n):
                        for y in range(oh):
                            iy = y * stride + i - pad
                            if iy < 0 or iy >= h:
                                continue
                            for xx in range(ow):
                                ix = xx * stride + j - pad
                                if ix < 0 or ix >= w:
                                    continue
                                cols[ch, i, j, b, y, xx] = x[b, ch, iy, ix]
    return out.reshape(c * kh * kw, n * oh * ow)


def col2im(const double[:, ::1] cols_flat, tuple shape, Py_ssize_t kh,
           Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t n = shape[0], c = shape[1], h = shape[2], w = shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    if cols_flat.shape[0] != c * kh * kw or cols_flat.shape[1] != n * oh * ow:
        raise ValueError("col2im: column buffer shape does not match image shape")
    out = np.zeros((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] img = out
    cdef Py_ssize_t b, ch, i, j, y, xx, iy, ix, row, col
    with nogil:
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ch * kh + i) * kw + j
                    for b in range(n):
                        for y in range(oh):
                            iy = y * stride + i - pad
                            if iy < 0 or iy >= h:
                                continue
                            col = (b * oh + y) * ow
                            for xx in range(ow):
                                ix = xx * stride + j - pad
                                if ix < 0 or ix >= w:
                                    continue
                                img[b, ch, iy, ix] += cols_flat[row, col + xx]
    return out
