# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: edit-distance DP and fused softmax / layer-norm.

Math must stay in lockstep with dsq.kernels.pyk, the fallback backend.
"""

import numpy as np

cimport cython
cimport numpy as cnp
from libc.math cimport exp, sqrt


ctypedef fused floating:
    float
    double


def levenshtein(const unsigned int[::1] a, const unsigned int[::1] b):
    """Unit-cost edit distance between two id sequences."""
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t m = b.shape[0]
    if n == 0:
        return m
    if m == 0:
        return n
    cdef cnp.ndarray[cnp.int64_t, ndim=1] prev_arr = np.arange(m + 1, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] cur_arr = np.empty(m + 1, dtype=np.int64)
    cdef long long[::1] prev = prev_arr
    cdef long long[::1] cur = cur_arr
    cdef long long[::1] tmp
    cdef Py_ssize_t i, j
    cdef long long cost, best
    for i in range(1, n + 1):
        cur[0] = i
        for j in range(1, m + 1):
            cost = prev[j - 1] + (0 if a[i - 1] == b[j - 1] else 1)
            best = prev[j] + 1
            if cur[j - 1] + 1 < best:
                best = cur[j - 1] + 1
            if cost < best:
                best = cost
            cur[j] = best
        tmp = prev
        prev = cur
        cur = tmp
    return int(prev[m])


def softmax_rows(floating[:, ::1] x, floating[:, ::1] out):
    """Row-wise stable softmax: out[i] = exp(x[i]-max(x[i])) / sum."""
    cdef Py_ssize_t rows = x.shape[0]
    cdef Py_ssize_t cols = x.shape[1]
    cdef Py_ssize_t i, j
    cdef double m, s
    for i in range(rows):
        m = x[i, 0]
        for j in range(1, cols):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(cols):
            out[i, j] = <floating>exp(<double>x[i, j] - m)
            s += out[i, j]
        for j in range(cols):
            out[i, j] = <floating>(out[i, j] / s)


def softmax_rows_backward(floating[:, ::1] y, floating[:, ::1] gy, floating[:, ::1] gx):
    """gx = y * (gy - sum(gy*y)) per row, for y = softmax(x)."""
    cdef Py_ssize_t rows = y.shape[0]
    cdef Py_ssize_t cols = y.shape[1]
    cdef Py_ssize_t i, j
    cdef double dot
    for i in range(rows):
        dot = 0.0
        for j in range(cols):
            dot += <double>gy[i, j] * <double>y[i, j]
        for j in range(cols):
            gx[i, j] = <floating>(<double>y[i, j] * (<double>gy[i, j] - dot))


def layer_norm_rows(floating[:, ::1] x, const floating[::1] gain,
                    const floating[::1] bias, double eps,
                    floating[:, ::1] out, floating[::1] mean, floating[::1] rstd):
    """Per-row normalization to zero mean / unit variance, then affine.

    Saves per-row mean and reciprocal std for the backward pass.
    """
    cdef Py_ssize_t rows = x.shape[0]
    cdef Py_ssize_t d = x.shape[1]
    cdef Py_ssize_t i, j
    cdef double m, v, r, diff
    for i in range(rows):
        m = 0.0
        for j in range(d):
            m += x[i, j]
        m /= d
        v = 0.0
        for j in range(d):
            diff = <double>x[i, j] - m
            v += diff * diff
        v /= d
        r = 1.0 / sqrt(v + eps)
        mean[i] = <floating>m
        rstd[i] = <floating>r
        for j in range(d):
            out[i, j] = <floating>(((<double>x[i, j] - m) * r) * <double>gain[j] + <double>bias[j])


def layer_norm_rows_backward(floating[:, ::1] x, const floating[::1] gain,
                             const floating[::1] mean, const floating[::1] rstd,
                             floating[:, ::1] gy, floating[:, ::1] gx,
                             floating[::1] ggain, floating[::1] gbias):
    """Backward of layer_norm_rows; ggain/gbias accumulate across rows."""
    cdef Py_ssize_t rows = x.shape[0]
    cdef Py_ssize_t d = x.shape[1]
    cdef Py_ssize_t i, j
    cdef double m, r, xhat, gxh, ma, mb
    for i in range(rows):
        m = <double>mean[i]
        r = <double>rstd[i]
        ma = 0.0
        mb = 0.0
        for j in range(d):
            xhat = (<double>x[i, j] - m) * r
            gxh = <double>gy[i, j] * <double>gain[j]
            ma += gxh
            mb += gxh * xhat
            ggain[j] += <floating>(<double>gy[i, j] * xhat)
            gbias[j] += gy[i, j]
        ma /= d
        mb /= d
        for j in range(d):
            xhat = (<double>x[i, j] - m) * r
            gxh = <double>gy[i, j] * <double>gain[j]
            gx[i, j] = <floating>(r * (gxh - ma - xhat * mb))
