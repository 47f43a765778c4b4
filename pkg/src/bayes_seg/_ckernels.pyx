# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col/col2im and nearest-neighbour upsampling kernels (float64)."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef inline void _col_range(Py_ssize_t j, Py_ssize_t w, Py_ssize_t wo, int stride, int padding,
                            Py_ssize_t* lo, Py_ssize_t* hi) nogil:
    # output columns ow with 0 <= ow*stride + j - padding < w
    cdef Py_ssize_t a = padding - j
    lo[0] = 0 if a <= 0 else (a + stride - 1) // stride
    hi[0] = (w - 1 + padding - j) // stride + 1 if w - 1 + padding - j >= 0 else 0
    if hi[0] > wo:
        hi[0] = wo
    if lo[0] > hi[0]:
        lo[0] = hi[0]


def im2col(double[:, :, :, ::1] x, int kh, int kw, int stride, int padding):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * padding - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * padding - kw) // stride + 1
    out = np.empty((n, c * kh * kw, ho * wo), dtype=np.float64)
    cdef double[:, :, ::1] cols = out
    cdef Py_ssize_t b, ch, i, j, oh, ow, row, ih, lo, hi, base
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        _col_range(j, w, wo, stride, padding, &lo, &hi)
                        for oh in range(ho):
                            ih = oh * stride + i - padding
                            base = oh * wo
                            if ih < 0 or ih >= h:
                                for ow in range(wo):
                                    cols[b, row, base + ow] = 0.0
                                continue
                            for ow in range(lo):
                                cols[b, row, base + ow] = 0.0
                            for ow in range(lo, hi):
                                cols[b, row, base + ow] = x[b, ch, ih, ow * stride + j - padding]
                            for ow in range(hi, wo):
                                cols[b, row, base + ow] = 0.0
    return out


def col2im(double[:, :, ::1] cols, tuple x_shape, int kh, int kw, int stride, int padding):
    cdef Py_ssize_t n = x_shape[0], c = x_shape[1], h = x_shape[2], w = x_shape[3]
    cdef Py_ssize_t ho = (h + 2 * padding - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = out
    cdef Py_ssize_t b, ch, i, j, oh, ow, row, ih, lo, hi, base
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        _col_range(j, w, wo, stride, padding, &lo, &hi)
                        for oh in range(ho):
                            ih = oh * stride + i - padding
                            if ih < 0 or ih >= h:
                                continue
                            base = oh * wo
                            for ow in range(lo, hi):
                                dx[b, ch, ih, ow * stride + j - padding] += cols[b, row, base + ow]
    return out


def upsample2x(double[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    out = np.empty((n, c, 2 * h, 2 * w), dtype=np.float64)
    cdef double[:, :, :, ::1] y = out
    cdef Py_ssize_t b, ch, i, j
    cdef double v
    for b in range(n):
        for ch in range(c):
            for i in range(h):
                for j in range(w):
                    v = x[b, ch, i, j]
                    y[b, ch, 2 * i, 2 * j] = v
                    y[b, ch, 2 * i, 2 * j + 1] = v
                    y[b, ch, 2 * i + 1, 2 * j] = v
                    y[b, ch, 2 * i + 1, 2 * j + 1] = v
    return out


def upsample2x_backward(double[:, :, :, ::1] g):
    cdef Py_ssize_t n = g.shape[0], c = g.shape[1], h = g.shape[2] // 2, w = g.shape[3] // 2
    out = np.empty((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = out
    cdef Py_ssize_t b, ch, i, j
    for b in range(n):
        for ch in range(c):
            for i in range(h):
                for j in range(w):
                    dx[b, ch, i, j] = ((g[b, ch, 2 * i, 2 * j] + g[b, ch, 2 * i, 2 * j + 1])
                                       + (g[b, ch, 2 * i + 1, 2 * j] + g[b, ch, 2 * i + 1, 2 * j + 1]))
    return out
