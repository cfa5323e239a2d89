# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col / col2im. Same layout and accumulation order as _pykernels."""

import numpy as np

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n * oh * ow, c * kh * kw), dtype=dtype)
    cdef real[:, ::1] o = out
    cdef Py_ssize_t b, y, xx, ch, i, j, row, col, sy, sx
    for b in range(n):
        for y in range(oh):
            for xx in range(ow):
                row = (b * oh + y) * ow + xx
                for ch in range(c):
                    for i in range(kh):
                        sy = y * stride - pad + i
                        if sy < 0 or sy >= h:
                            continue
                        for j in range(kw):
                            sx = xx * stride - pad + j
                            if sx < 0 or sx >= w:
                                continue
                            col = (ch * kh + i) * kw + j
                            o[row, col] = x[b, ch, sy, sx]
    return out


def col2im(real[:, ::1] cols, Py_ssize_t n, Py_ssize_t c, Py_ssize_t h, Py_ssize_t w,
           int kh, int kw, int stride, int pad):
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n, c, h, w), dtype=dtype)
    cdef real[:, :, :, ::1] o = out
    cdef Py_ssize_t b, y, xx, ch, i, j, row, col, sy, sx
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    col = (ch * kh + i) * kw + j
                    for y in range(oh):
                        sy = y * stride - pad + i
                        if sy < 0 or sy >= h:
                            continue
                        for xx in range(ow):
                            sx = xx * stride - pad + j
                            if sx < 0 or sx >= w:
                                continue
                            row = (b * oh + y) * ow + xx
                            o[b, ch, sy, sx] += cols[row, col]
    return out
