# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels; mirrors ``_kernels_py``."""

import numpy as np
cimport cython
from cython cimport floating
from libc.math cimport exp, expf


cdef inline floating _exp(floating x) noexcept nogil:
    if floating is float:
        return expf(x)
    return exp(x)


def masked_softmax_forward(floating[:, ::1] scores, const unsigned char[:, ::1] mask):
    cdef Py_ssize_t rows = scores.shape[0], n = scores.shape[1], i, j
    cdef floating mx, e
    cdef double total
    cdef Py_ssize_t bad = -1
    out_arr = np.zeros((rows, n), dtype=np.float64 if floating is double else np.float32)
    cdef floating[:, ::1] out = out_arr
    with nogil:
        for i in range(rows):
            j = 0
            while j < n and not mask[i, j]:
                j += 1
            if j == n:
                bad = i
                break
            mx = scores[i, j]
            for j in range(j, n):
                if mask[i, j] and scores[i, j] > mx:
                    mx = scores[i, j]
            total = 0.0
            for j in range(n):
                if mask[i, j]:
                    e = _exp(scores[i, j] - mx)
                    out[i, j] = e
                    total += e
            e = <floating>(1.0 / total)
            for j in range(n):
                out[i, j] = out[i, j] * e
    if bad >= 0:
        return None, bad
    return out_arr, -1


def masked_softmax_backward(floating[:, ::1] y, floating[:, ::1] g):
    cdef Py_ssize_t rows = y.shape[0], n = y.shape[1], i, j
    cdef double dot
    out_arr = np.empty((rows, n), dtype=np.float64 if floating is double else np.float32)
    cdef floating[:, ::1] out = out_arr
    for i in range(rows):
        dot = 0.0
        for j in range(n):
            dot += g[i, j] * y[i, j]
        for j in range(n):
            out[i, j] = <floating>(y[i, j] * (g[i, j] - dot))
    return out_arr


cdef inline Py_ssize_t _reflect(Py_ssize_t idx, Py_ssize_t n) noexcept nogil:
    # symmetric extension (edge sample repeated), periodic with period 2n
    cdef Py_ssize_t m = idx % (2 * n)
    if m < 0:
        m += 2 * n
    if m >= n:
        m = 2 * n - 1 - m
    return m


def blur_axis(floating[:, :, ::1] img, double[::1] kernel, int axis):
    cdef Py_ssize_t h = img.shape[0], w = img.shape[1], c = img.shape[2]
    cdef Py_ssize_t klen = kernel.shape[0], r = (klen - 1) // 2
    cdef Py_ssize_t y, x, ch, k, src, rowlen = w * c
    cdef double wk
    acc_arr = np.zeros((h, w, c), dtype=np.float64)
    cdef double[:, :, ::1] acc = acc_arr
    # source column for every (tap, x) so the inner loops stay branch-free
    idx_arr = np.empty((klen, w), dtype=np.intp)
    cdef Py_ssize_t[:, ::1] idx = idx_arr
    for k in range(klen):
        for x in range(w):
            idx[k, x] = _reflect(x + k - r, w)
    with nogil:
        if axis == 0:
            for y in range(h):
                for k in range(klen):
                    src = _reflect(y + k - r, h)
                    wk = kernel[k]
                    for x in range(w):
                        for ch in range(c):
                            acc[y, x, ch] += wk * img[src, x, ch]
        else:
            for y in range(h):
                for k in range(klen):
                    wk = kernel[k]
                    for x in range(w):
                        src = idx[k, x]
                        for ch in range(c):
                            acc[y, x, ch] += wk * img[y, src, ch]
    return acc_arr.astype(np.float64 if floating is double else np.float32, copy=False)


def span_mask(Py_ssize_t length, const Py_ssize_t[::1] starts, const Py_ssize_t[::1] ends):
    out_arr = np.zeros((length, length), dtype=np.uint8)
    cdef unsigned char[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, k, s, e
    with nogil:
        for i in range(length):
            for j in range(i + 1):
                out[i, j] = 1
        for k in range(starts.shape[0]):
            s = starts[k]
            e = ends[k]
            for i in range(s, e):
                for j in range(s, e):
                    out[i, j] = 1
    return out_arr.view(np.bool_)
