"""Pure numpy implementations of the hot kernels.

Every function takes C-contiguous 2-D (or 1-D for the pointwise ones)
arrays and returns freshly allocated arrays of the same dtype.  The
compiled module ``_ckernels`` exposes exactly the same functions.
"""
import numpy as np

GELU_C = 0.7978845608028654  # sqrt(2 / pi)
GELU_K = 0.044715


def softmax_rows(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_backward(y, gy):
    dot = (gy * y).sum(axis=1, keepdims=True)
    return y * (gy - dot)


def normalize_rows(x, eps):
    """Zero-mean / unit-variance rows.

    Rows whose variance falls below ``eps`` are divided by ``sqrt(eps)``
    instead, so constant rows map to zeros.  Returns ``(xhat, inv, active)``
    where ``active`` marks rows normalized by their own variance.
    """
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1)
    active = var > eps
    inv = 1.0 / np.sqrt(np.where(active, var, eps))
    inv = inv.astype(x.dtype)
    return xc * inv[:, None], inv, active.astype(np.uint8)


def normalize_rows_backward(xhat, inv, active, g):
    gm = g.mean(axis=1, keepdims=True)
    proj = (g * xhat).mean(axis=1, keepdims=True) * active[:, None].astype(g.dtype)
    return inv[:, None] * (g - gm - xhat * proj)


def gelu(x):
    t = np.tanh(GELU_C * (x + GELU_K * x * x * x))
    return 0.5 * x * (1.0 + t)


def gelu_backward(x, g):
    t = np.tanh(GELU_C * (x + GELU_K * x * x * x))
    dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
    return g * (0.5 * (1.0 + t) + 0.5 * x * dt)


def cross_entropy_rows(logits, labels):
    """Mean softmax cross-entropy with log-sum-exp stabilization.

    Returns ``(loss, probs)``; ``probs`` feeds the backward pass.
    """
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    e = np.exp(z)
    s = e.sum(axis=1, keepdims=True)
    lse = np.log(s)[:, 0]
    picked = z[np.arange(len(labels)), labels]
    loss = float((lse - picked).sum() / len(labels))
    return loss, e / s
