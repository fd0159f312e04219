# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col / col2im loops used by the convolution ops."""

import numpy as np
cimport cython

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] x, Py_ssize_t k, Py_ssize_t stride,
           Py_ssize_t oh, Py_ssize_t ow):
    cdef Py_ssize_t n_b = x.shape[0], n_c = x.shape[1]
    cdef Py_ssize_t b, c, ki, kj, oy, ox, row, iy
    dtype = np.float32 if real is float else np.float64
    out = np.empty((n_b, n_c * k * k, oh * ow), dtype=dtype)
    cdef real[:, :, ::1] cols = out
    with nogil:
        for b in range(n_b):
            for c in range(n_c):
                for ki in range(k):
                    for kj in range(k):
                        row = (c * k + ki) * k + kj
                        for oy in range(oh):
                            iy = oy * stride + ki
                            for ox in range(ow):
                                cols[b, row, oy * ow + ox] = x[b, c, iy, ox * stride + kj]
    return out


def col2im(real[:, :, ::1] cols, Py_ssize_t channels, Py_ssize_t height,
           Py_ssize_t width, Py_ssize_t k, Py_ssize_t stride,
           Py_ssize_t oh, Py_ssize_t ow):
    cdef Py_ssize_t n_b = cols.shape[0]
    cdef Py_ssize_t b, c, ki, kj, oy, ox, row, iy
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n_b, channels, height, width), dtype=dtype)
    cdef real[:, :, :, ::1] x = out
    with nogil:
        for b in range(n_b):
            for c in range(channels):
                for ki in range(k):
                    for kj in range(k):
                        row = (c * k + ki) * k + kj
                        for oy in range(oh):
                            iy = oy * stride + ki
                            for ox in range(ow):
                                x[b, c, iy, ox * stride + kj] += cols[b, row, oy * ow + ox]
    return out


def accumulate_window(real[:, :, ::1] acc, real[:, ::1] weight_acc,
                      real[:, :, ::1] patch, real[:, ::1] window,
                      Py_ssize_t row, Py_ssize_t col):
    cdef Py_ssize_t n_c = patch.shape[0], ph = patch.shape[1], pw = patch.shape[2]
    cdef Py_ssize_t c, i, j
    with nogil:
        for i in range(ph):
            for j in range(pw):
                weight_acc[row + i, col + j] += window[i, j]
        for c in range(n_c):
            for i in range(ph):
                for j in range(pw):
                    acc[c, row + i, col + j] += patch[c, i, j] * window[i, j]
