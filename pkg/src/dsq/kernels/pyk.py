"""Numpy / pure-Python fallback for the compiled kernels in _ck.pyx.

Same signatures, same math. The only tolerated divergence from the compiled
backend is floating-point summation order (numpy reductions are pairwise).
"""

import numpy as np


def levenshtein(a, b):
    n, m = len(a), len(b)
    if n == 0:
        return m
    if m == 0:
        return n
    prev = list(range(m + 1))
    for i in range(1, n + 1):
        cur = [i] + [0] * m
        ai = a[i - 1]
        for j in range(1, m + 1):
            cost = prev[j - 1] + (0 if ai == b[j - 1] else 1)
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, cost)
        prev = cur
    return prev[m]


def softmax_rows(x, out):
    np.subtract(x, x.max(axis=1, keepdims=True), out=out)
    np.exp(out, out=out)
    out /= out.sum(axis=1, keepdims=True)


def softmax_rows_backward(y, gy, gx):
    dot = (gy * y).sum(axis=1, keepdims=True)
    np.multiply(y, gy - dot, out=gx)


def layer_norm_rows(x, gain, bias, eps, out, mean, rstd):
    mean[:] = x.mean(axis=1)
    var = x.var(axis=1)
    rstd[:] = 1.0 / np.sqrt(var + eps)
    np.multiply((x - mean[:, None]) * rstd[:, None], gain[None, :], out=out)
    out += bias[None, :]


def layer_norm_rows_backward(x, gain, mean, rstd, gy, gx, ggain, gbias):
    xhat = (x - mean[:, None]) * rstd[:, None]
    gxhat = gy * gain[None, :]
    ma = gxhat.mean(axis=1, keepdims=True)
    mb = (gxhat * xhat).mean(axis=1, keepdims=True)
    gx[:] = rstd[:, None] * (gxhat - ma - xhat * mb)
    ggain += (gy * xhat).sum(axis=0)
    gbias += gy.sum(axis=0)
