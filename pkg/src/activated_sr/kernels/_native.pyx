# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled implementations of the hot kernels (see package docstring)."""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def apply_weights_axis0(const double[:, ::1] arr, const long[:, ::1] idx, const double[:, ::1] w):
    """Resample along axis 0 with precomputed taps; matches _numpy contract."""
    cdef Py_ssize_t n_out = idx.shape[0]
    cdef Py_ssize_t n_tap = idx.shape[1]
    cdef Py_ssize_t width = arr.shape[1]
    cdef cnp.ndarray[double, ndim=2] out = np.zeros((n_out, width))
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t o, t, j, src
    cdef double wt
    for o in range(n_out):
        for t in range(n_tap):
            src = idx[o, t]
            wt = w[o, t]
            for j in range(width):
                ov[o, j] += wt * arr[src, j]
    return out


def gauss_valid(const double[:, ::1] arr, const double[::1] k):
    """Separable valid-mode correlation; matches _numpy contract."""
    cdef Py_ssize_t h = arr.shape[0]
    cdef Py_ssize_t w = arr.shape[1]
    cdef Py_ssize_t t = k.shape[0]
    cdef Py_ssize_t h_out = h - t + 1
    cdef Py_ssize_t w_out = w - t + 1
    cdef cnp.ndarray[double, ndim=2] rows = np.zeros((h_out, w))
    cdef cnp.ndarray[double, ndim=2] out = np.zeros((h_out, w_out))
    cdef double[:, ::1] rv = rows
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t i, j, u
    cdef double acc
    for i in range(h_out):
        for j in range(w):
            acc = 0.0
            for u in range(t):
                acc += k[u] * arr[i + u, j]
            rv[i, j] = acc
    for i in range(h_out):
        for j in range(w_out):
            acc = 0.0
            for u in range(t):
                acc += k[u] * rv[i, j + u]
            ov[i, j] = acc
    return out
