"""Numba-jitted twins of the hot kernels in ``_kernels_numpy``.

Same contracts as the numpy versions. Loops run left-to-right per row, so
reductions have a fixed serial summation order. ``fastmath`` stays off to keep
IEEE semantics; results are deterministic within one process configuration
but not bitwise-equal to the numpy path (numpy reduces pairwise).
"""

import math

import numpy as np
from numba import njit

SQRT1_2 = 0.7071067811865476
INV_SQRT_2PI = 0.3989422804014327

_JIT = dict(cache=True, fastmath=False, nogil=True)


@njit(**_JIT)
def softmax_fwd(x, tau):
    rows, n = x.shape
    out = np.empty_like(x)
    for r in range(rows):
        m = x[r, 0]
        for j in range(1, n):
            if x[r, j] > m:
                m = x[r, j]
        s = 0.0
        for j in range(n):
            e = math.exp((x[r, j] - m) / tau)
            out[r, j] = e
            s += e
        inv = 1.0 / s
        for j in range(n):
            out[r, j] *= inv
    return out


@njit(**_JIT)
def softmax_bwd(y, gy, tau):
    rows, n = y.shape
    gx = np.empty_like(y)
    for r in range(rows):
        dot = 0.0
        for j in range(n):
            dot += gy[r, j] * y[r, j]
        for j in range(n):
            gx[r, j] = (gy[r, j] - dot) * y[r, j] / tau
    return gx


@njit(**_JIT)
def layernorm_fwd(x, eps):
    rows, n = x.shape
    xhat = np.empty_like(x)
    rstd = np.empty(rows, dtype=np.float64)
    for r in range(rows):
        mean = 0.0
        for j in range(n):
            mean += x[r, j]
        mean /= n
        var = 0.0
        for j in range(n):
            d = x[r, j] - mean
            var += d * d
        var /= n
        rs = 1.0 / math.sqrt(var + eps)
        rstd[r] = rs
        for j in range(n):
            xhat[r, j] = (x[r, j] - mean) * rs
    return xhat, rstd


@njit(**_JIT)
def layernorm_bwd(xhat, rstd, g):
    rows, n = xhat.shape
    gx = np.empty_like(xhat)
    for r in range(rows):
        gm = 0.0
        gxh = 0.0
        for j in range(n):
            gm += g[r, j]
            gxh += g[r, j] * xhat[r, j]
        gm /= n
        gxh /= n
        for j in range(n):
            gx[r, j] = (g[r, j] - gm - xhat[r, j] * gxh) * rstd[r]
    return gx


@njit(cache=True, fastmath=True, nogil=True)  # elementwise: no reduction order
def gelu_fwd(x):
    flat = x.ravel()
    out = np.empty_like(flat)
    for i in range(flat.shape[0]):
        out[i] = 0.5 * flat[i] * (1.0 + math.erf(flat[i] * SQRT1_2))
    return out.reshape(x.shape)


@njit(cache=True, fastmath=True, nogil=True)  # elementwise: no reduction order
def gelu_bwd(x, g):
    xf = x.ravel()
    gf = g.ravel()
    out = np.empty_like(xf)
    for i in range(xf.shape[0]):
        cdf = 0.5 * (1.0 + math.erf(xf[i] * SQRT1_2))
        pdf = INV_SQRT_2PI * math.exp(-0.5 * xf[i] * xf[i])
        out[i] = gf[i] * (cdf + xf[i] * pdf)
    return out.reshape(x.shape)


@njit(**_JIT)
def adamw_step(p, g, m, v, lr, beta1, beta2, eps, weight_decay, bc1, bc2):
    for i in range(p.shape[0]):
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
        mhat = m[i] / bc1
        vhat = v[i] / bc2
        p[i] -= lr * (mhat / (math.sqrt(vhat) + eps) + weight_decay * p[i])
