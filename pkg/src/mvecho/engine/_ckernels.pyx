# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution kernels (NHWC, input already padded).

Mirrors ``_kernels_py`` exactly; the inner loop always runs over the
contiguous channel axis.
"""

import numpy as np

from cython cimport floating


def im2col(floating[:, :, :, ::1] xp, int kh, int kw, int stride, int ho, int wo):
    cdef Py_ssize_t n_ = xp.shape[0], c_ = xp.shape[3]
    cdef Py_ssize_t n, i, j, a, b, c, row, col
    dtype = np.float64 if floating is double else np.float32
    out = np.empty((n_ * ho * wo, kh * kw * c_), dtype=dtype)
    cdef floating[:, ::1] cols = out
    with nogil:
        for n in range(n_):
            for i in range(ho):
                for j in range(wo):
                    row = (n * ho + i) * wo + j
                    for a in range(kh):
                        for b in range(kw):
                            col = (a * kw + b) * c_
                            for c in range(c_):
                                cols[row, col + c] = xp[n, i * stride + a, j * stride + b, c]
    return out


def col2im(floating[:, ::1] cols, tuple xp_shape, int kh, int kw, int stride, int ho, int wo):
    cdef Py_ssize_t n_ = xp_shape[0], c_ = xp_shape[3]
    cdef Py_ssize_t n, i, j, a, b, c, row, col
    dtype = np.float64 if floating is double else np.float32
    out = np.zeros(xp_shape, dtype=dtype)
    cdef floating[:, :, :, ::1] dxp = out
    with nogil:
        for n in range(n_):
            for i in range(ho):
                for j in range(wo):
                    row = (n * ho + i) * wo + j
                    for a in range(kh):
                        for b in range(kw):
                            col = (a * kw + b) * c_
                            for c in range(c_):
                                dxp[n, i * stride + a, j * stride + b, c] += cols[row, col + c]
    return out


def dw_forward(floating[:, :, :, ::1] xp, floating[:, :, ::1] w, int stride, int ho, int wo):
    cdef Py_ssize_t n_ = xp.shape[0], c_ = xp.shape[3], kh = w.shape[0], kw = w.shape[1]
    cdef Py_ssize_t n, i, j, a, b, c
    dtype = np.float64 if floating is double else np.float32
    res = np.zeros((n_, ho, wo, c_), dtype=dtype)
    cdef floating[:, :, :, ::1] out = res
    with nogil:
        for n in range(n_):
            for i in range(ho):
                for j in range(wo):
                    for a in range(kh):
                        for b in range(kw):
                            for c in range(c_):
                                out[n, i, j, c] += xp[n, i * stride + a, j * stride + b, c] * w[a, b, c]
    return res


def dw_backward(floating[:, :, :, ::1] xp, floating[:, :, ::1] w, floating[:, :, :, ::1] g, int stride):
    cdef Py_ssize_t n_ = xp.shape[0], c_ = xp.shape[3], kh = w.shape[0], kw = w.shape[1]
    cdef Py_ssize_t ho = g.shape[1], wo = g.shape[2]
    cdef Py_ssize_t n, i, j, a, b, c, y, x
    dtype = np.float64 if floating is double else np.float32
    dx_arr = np.zeros((xp.shape[0], xp.shape[1], xp.shape[2], xp.shape[3]), dtype=dtype)
    dw_arr = np.zeros((kh, kw, c_), dtype=dtype)
    cdef floating[:, :, :, ::1] dxp = dx_arr
    cdef floating[:, :, ::1] dw = dw_arr
    cdef floating gv
    with nogil:
        for n in range(n_):
            for i in range(ho):
                for j in range(wo):
                    for a in range(kh):
                        y = i * stride + a
                        for b in range(kw):
                            x = j * stride + b
                            for c in range(c_):
                                gv = g[n, i, j, c]
                                dxp[n, y, x, c] += gv * w[a, b, c]
                                dw[a, b, c] += gv * xp[n, y, x, c]
    return dx_arr, dw_arr
