"""Pure numpy implementations of the hot kernels.

Every function takes and returns C-contiguous float64 arrays. ``_kernels.pyx``
implements the same signatures as fused loops; the two are checked against
each other in the test suite.
"""
import numpy as np

SQRT_2_OVER_PI = 0.7978845608028654
GELU_C = 0.044715


def softmax_bias_fwd(x, bias):
    """Row softmax of ``x + bias``; ``x`` is (R, C), ``bias`` is (Q, C) with R % Q == 0.

    Bias row ``r % Q`` applies to row ``r``.
    """
    rows, cols = x.shape
    q = bias.shape[0]
    z = (x.reshape(rows // q, q, cols) + bias).reshape(rows, cols)
    m = z.max(axis=1, keepdims=True)
    if np.isneginf(m).any():
        bad = int(np.flatnonzero(np.isneginf(m[:, 0]))[0])
        raise FloatingPointError(f"degenerate softmax row {bad}: every entry is -inf")
    e = np.exp(z - m)
    e /= e.sum(axis=1, keepdims=True)
    return e


def softmax_bwd(y, g):
    dot = (y * g).sum(axis=1, keepdims=True)
    return y * (g - dot)


def layernorm_fwd(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0].copy()


def layernorm_bwd(g, xhat, rstd, gamma):
    dgamma = (g * xhat).sum(axis=0)
    dbeta = g.sum(axis=0)
    gx = g * gamma
    m1 = gx.mean(axis=1, keepdims=True)
    m2 = (gx * xhat).mean(axis=1, keepdims=True)
    dx = (gx - m1 - xhat * m2) * rstd[:, None]
    return dx, dgamma, dbeta


def gelu_fwd(x):
    u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(u))


def gelu_bwd(x, g):
    u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x)
    t = np.tanh(u)
    du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
    return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
