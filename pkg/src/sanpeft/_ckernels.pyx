# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled row kernels; drop-in replacement for ``_pykernels``.

Reductions run sequentially left to right so results do not depend on
thread count or vector width.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport exp, log, sqrt, tanh

cnp.import_array()

cdef double GELU_C = 0.7978845608028654
cdef double GELU_K = 0.044715


def softmax_rows(floating[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    cdef double m, s
    out = np.empty((n, d), dtype=np.asarray(x).dtype)
    cdef floating[:, ::1] y = out
    for i in range(n):
        m = x[i, 0]
        for j in range(1, d):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(d):
            y[i, j] = exp(x[i, j] - m)
            s += y[i, j]
        for j in range(d):
            y[i, j] = y[i, j] / s
    return out


def softmax_rows_backward(floating[:, ::1] y, floating[:, ::1] gy):
    cdef Py_ssize_t n = y.shape[0], d = y.shape[1], i, j
    cdef double dot
    out = np.empty((n, d), dtype=np.asarray(y).dtype)
    cdef floating[:, ::1] gx = out
    for i in range(n):
        dot = 0.0
        for j in range(d):
            dot += gy[i, j] * y[i, j]
        for j in range(d):
            gx[i, j] = y[i, j] * (gy[i, j] - dot)
    return out


def normalize_rows(floating[:, ::1] x, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    cdef double mu, var, c
    dt = np.asarray(x).dtype
    out = np.empty((n, d), dtype=dt)
    inv_arr = np.empty(n, dtype=dt)
    act_arr = np.empty(n, dtype=np.uint8)
    cdef floating[:, ::1] xh = out
    cdef floating[::1] inv = inv_arr
    cdef unsigned char[::1] act = act_arr
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += x[i, j]
        mu = mu / d
        var = 0.0
        for j in range(d):
            c = x[i, j] - mu
            var += c * c
        var = var / d
        if var > eps:
            act[i] = 1
            inv[i] = 1.0 / sqrt(var)
        else:
            act[i] = 0
            inv[i] = 1.0 / sqrt(eps)
        for j in range(d):
            xh[i, j] = (x[i, j] - mu) * inv[i]
    return out, inv_arr, act_arr


def normalize_rows_backward(floating[:, ::1] xhat, floating[::1] inv,
                            unsigned char[::1] active, floating[:, ::1] g):
    cdef Py_ssize_t n = xhat.shape[0], d = xhat.shape[1], i, j
    cdef double gm, proj
    out = np.empty((n, d), dtype=np.asarray(g).dtype)
    cdef floating[:, ::1] gx = out
    for i in range(n):
        gm = 0.0
        proj = 0.0
        for j in range(d):
            gm += g[i, j]
            proj += g[i, j] * xhat[i, j]
        gm = gm / d
        proj = proj / d if active[i] else 0.0
        for j in range(d):
            gx[i, j] = inv[i] * (g[i, j] - gm - xhat[i, j] * proj)
    return out


def gelu(floating[::1] x):
    cdef Py_ssize_t n = x.shape[0], i
    cdef double v, t
    out = np.empty(n, dtype=np.asarray(x).dtype)
    cdef floating[::1] y = out
    for i in range(n):
        v = x[i]
        t = tanh(GELU_C * (v + GELU_K * v * v * v))
        y[i] = 0.5 * v * (1.0 + t)
    return out


def gelu_backward(floating[::1] x, floating[::1] g):
    cdef Py_ssize_t n = x.shape[0], i
    cdef double v, t, dt
    out = np.empty(n, dtype=np.asarray(x).dtype)
    cdef floating[::1] gx = out
    for i in range(n):
        v = x[i]
        t = tanh(GELU_C * (v + GELU_K * v * v * v))
        dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * v * v)
        gx[i] = g[i] * (0.5 * (1.0 + t) + 0.5 * v * dt)
    return out


def cross_entropy_rows(floating[:, ::1] logits, cnp.int64_t[::1] labels):
    cdef Py_ssize_t n = logits.shape[0], d = logits.shape[1], i, j
    cdef double m, s, total = 0.0
    probs = np.empty((n, d), dtype=np.asarray(logits).dtype)
    cdef floating[:, ::1] p = probs
    for i in range(n):
        m = logits[i, 0]
        for j in range(1, d):
            if logits[i, j] > m:
                m = logits[i, j]
        s = 0.0
        for j in range(d):
            p[i, j] = exp(logits[i, j] - m)
            s += p[i, j]
        total += log(s) - (logits[i, labels[i]] - m)
        for j in range(d):
            p[i, j] = p[i, j] / s
    return total / n, probs
