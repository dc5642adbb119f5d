"""Pure-numpy implementations of the hot kernels.

Every function here has a numba twin in ``_kernels_numba``; the active set is
chosen once at import time by ``backend``. All kernels take C-contiguous
float64 arrays reshaped to 2-D ``[rows, n]`` (last axis is the reduced axis)
and return freshly allocated arrays.
"""

import numpy as np
from scipy.special import erf

SQRT1_2 = 0.7071067811865476
INV_SQRT_2PI = 0.3989422804014327


def softmax_fwd(x, tau):
    m = np.max(x, axis=1, keepdims=True)
    e = np.exp((x - m) / tau)
    return e / np.sum(e, axis=1, keepdims=True)


def softmax_bwd(y, gy, tau):
    dot = np.sum(gy * y, axis=1, keepdims=True)
    return (gy - dot) * y / tau


def layernorm_fwd(x, eps):
    mean = np.mean(x, axis=1, keepdims=True)
    var = np.mean((x - mean) ** 2, axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    return (x - mean) * rstd, rstd[:, 0].copy()


def layernorm_bwd(xhat, rstd, g):
    n = xhat.shape[1]
    gm = np.sum(g, axis=1, keepdims=True) / n
    gx = np.sum(g * xhat, axis=1, keepdims=True) / n
    return (g - gm - xhat * gx) * rstd[:, None]


def gelu_fwd(x):
    return 0.5 * x * (1.0 + erf(x * SQRT1_2))


def gelu_bwd(x, g):
    cdf = 0.5 * (1.0 + erf(x * SQRT1_2))
    pdf = INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return g * (cdf + x * pdf)


def adamw_step(p, g, m, v, lr, beta1, beta2, eps, weight_decay, bc1, bc2):
    """In-place decoupled-weight-decay adaptive-moment update on flat views."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    mhat = m / bc1
    vhat = v / bc2
    p -= lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * p)
