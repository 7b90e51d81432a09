"""Numba twins of the reference kernels.

Explicit loops, one pass per row where possible; semantics must match
``reference.py`` (parity asserted in tests). Importing this module requires
numba; ``kernels/__init__`` only does so when the numba backend is selected.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def layer_norm_fwd(x, eps):
    rows, cols = x.shape
    y = np.empty_like(x)
    inv_std = np.empty(rows)
    for r in range(rows):
        mu = 0.0
        for c in range(cols):
            mu += x[r, c]
        mu /= cols
        var = 0.0
        for c in range(cols):
            d = x[r, c] - mu
            var += d * d
        var /= cols
        s = 1.0 / np.sqrt(var + eps)
        inv_std[r] = s
        for c in range(cols):
            y[r, c] = (x[r, c] - mu) * s
    return y, inv_std


@njit(cache=True)
def layer_norm_bwd(y, inv_std, gy):
    rows, cols = y.shape
    gx = np.empty_like(y)
    for r in range(rows):
        g_mean = 0.0
        dot = 0.0
        for c in range(cols):
            g_mean += gy[r, c]
            dot += gy[r, c] * y[r, c]
        g_mean /= cols
        dot /= cols
        s = inv_std[r]
        for c in range(cols):
            gx[r, c] = s * (gy[r, c] - g_mean - y[r, c] * dot)
    return gx


@njit(cache=True)
def softmax_fwd(x):
    rows, cols = x.shape
    y = np.empty_like(x)
    for r in range(rows):
        hi = x[r, 0]
        for c in range(1, cols):
            if x[r, c] > hi:
                hi = x[r, c]
        total = 0.0
        for c in range(cols):
            e = np.exp(x[r, c] - hi)
            y[r, c] = e
            total += e
        for c in range(cols):
            y[r, c] /= total
    return y


@njit(cache=True)
def softmax_bwd(y, gy):
    rows, cols = y.shape
    gx = np.empty_like(y)
    for r in range(rows):
        dot = 0.0
        for c in range(cols):
            dot += gy[r, c] * y[r, c]
        for c in range(cols):
            gx[r, c] = y[r, c] * (gy[r, c] - dot)
    return gx


@njit(cache=True)
def log_softmax_fwd(x):
    rows, cols = x.shape
    y = np.empty_like(x)
    for r in range(rows):
        hi = x[r, 0]
        for c in range(1, cols):
            if x[r, c] > hi:
                hi = x[r, c]
        total = 0.0
        for c in range(cols):
            total += np.exp(x[r, c] - hi)
        log_z = np.log(total)
        for c in range(cols):
            y[r, c] = x[r, c] - hi - log_z
    return y


@njit(cache=True)
def log_softmax_bwd(y, gy):
    rows, cols = y.shape
    gx = np.empty_like(y)
    for r in range(rows):
        total = 0.0
        for c in range(cols):
            total += gy[r, c]
        for c in range(cols):
            gx[r, c] = gy[r, c] - np.exp(y[r, c]) * total
    return gx


@njit(cache=True)
def gather_rows(x, idx):
    k = idx.shape[0]
    cols = x.shape[1]
    out = np.empty((k, cols))
    for i in range(k):
        src = idx[i]
        for c in range(cols):
            out[i, c] = x[src, c]
    return out


@njit(cache=True)
def scatter_add_rows(out, idx, g):
    k = idx.shape[0]
    cols = out.shape[1]
    for i in range(k):
        dst = idx[i]
        for c in range(cols):
            out[dst, c] += g[i, c]


@njit(cache=True)
def relu_fwd(x):
    rows, cols = x.shape
    y = np.empty_like(x)
    for r in range(rows):
        for c in range(cols):
            v = x[r, c]
            y[r, c] = v if v > 0.0 else 0.0
    return y


@njit(cache=True)
def relu_bwd(x, gy):
    rows, cols = x.shape
    gx = np.empty_like(x)
    for r in range(rows):
        for c in range(cols):
            gx[r, c] = gy[r, c] if x[r, c] > 0.0 else 0.0
    return gx


@njit(cache=True)
def adam_step(p, g, m, v, lr, beta1, beta2, eps, t):
    n = p.shape[0]
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for i in range(n):
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
        p[i] -= lr * (m[i] / c1) / (np.sqrt(v[i] / c2) + eps)


@njit(cache=True)
def sgd_step(p, g, vel, lr, momentum):
    n = p.shape[0]
    for i in range(n):
        vel[i] = momentum * vel[i] + g[i]
        p[i] -= lr * vel[i]
