# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Fused-loop versions of the hot kernels (same signatures as _kernels_py)."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, INFINITY

cnp.import_array()

cdef double SQRT_2_OVER_PI = 0.7978845608028654
cdef double GELU_C = 0.044715


cdef inline double _tanh(double u) noexcept nogil:
    # libm tanh is several times slower than exp on this path
    if u > 20.0:
        return 1.0
    if u < -20.0:
        return -1.0
    return 1.0 - 2.0 / (exp(2.0 * u) + 1.0)


def softmax_bias_fwd(double[:, ::1] x, double[:, ::1] bias):
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1], q = bias.shape[0]
    cdef Py_ssize_t r, c, br
    cdef double m, v, s
    out = np.empty((rows, cols), dtype=np.float64)
    cdef double[:, ::1] y = out
    cdef Py_ssize_t bad = -1
    with nogil:
        for r in range(rows):
            br = r % q
            m = -INFINITY
            for c in range(cols):
                v = x[r, c] + bias[br, c]
                y[r, c] = v
                if v > m:
                    m = v
            if m == -INFINITY:
                bad = r
                break
            s = 0.0
            for c in range(cols):
                v = y[r, c]
                if v == -INFINITY:
                    y[r, c] = 0.0
                else:
                    v = exp(v - m)
                    y[r, c] = v
                    s += v
            s = 1.0 / s
            for c in range(cols):
                y[r, c] = y[r, c] * s
    if bad >= 0:
        raise FloatingPointError(f"degenerate softmax row {bad}: every entry is -inf")
    return out


def softmax_bwd(double[:, ::1] y, double[:, ::1] g):
    cdef Py_ssize_t rows = y.shape[0], cols = y.shape[1], r, c
    cdef double dot
    out = np.empty((rows, cols), dtype=np.float64)
    cdef double[:, ::1] dx = out
    with nogil:
        for r in range(rows):
            dot = 0.0
            for c in range(cols):
                dot += y[r, c] * g[r, c]
            for c in range(cols):
                dx[r, c] = y[r, c] * (g[r, c] - dot)
    return out


def layernorm_fwd(double[:, ::1] x, double[::1] gamma, double[::1] beta, double eps):
    cdef Py_ssize_t rows = x.shape[0], n = x.shape[1], r, c
    cdef double mu, var, d, rs
    y_arr = np.empty((rows, n), dtype=np.float64)
    xhat_arr = np.empty((rows, n), dtype=np.float64)
    rstd_arr = np.empty(rows, dtype=np.float64)
    cdef double[:, ::1] y = y_arr
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[::1] rstd = rstd_arr
    with nogil:
        for r in range(rows):
            mu = 0.0
            for c in range(n):
                mu += x[r, c]
            mu = mu / n
            var = 0.0
            for c in range(n):
                d = x[r, c] - mu
                var += d * d
            var = var / n
            rs = 1.0 / sqrt(var + eps)
            rstd[r] = rs
            for c in range(n):
                d = (x[r, c] - mu) * rs
                xhat[r, c] = d
                y[r, c] = d * gamma[c] + beta[c]
    return y_arr, xhat_arr, rstd_arr


def layernorm_bwd(double[:, ::1] g, double[:, ::1] xhat, double[::1] rstd, double[::1] gamma):
    cdef Py_ssize_t rows = g.shape[0], n = g.shape[1], r, c
    cdef double m1, m2, gx
    dx_arr = np.empty((rows, n), dtype=np.float64)
    dgamma_arr = np.zeros(n, dtype=np.float64)
    dbeta_arr = np.zeros(n, dtype=np.float64)
    cdef double[:, ::1] dx = dx_arr
    cdef double[::1] dgamma = dgamma_arr
    cdef double[::1] dbeta = dbeta_arr
    with nogil:
        for r in range(rows):
            m1 = 0.0
            m2 = 0.0
            for c in range(n):
                gx = g[r, c] * gamma[c]
                m1 += gx
                m2 += gx * xhat[r, c]
                dgamma[c] += g[r, c] * xhat[r, c]
                dbeta[c] += g[r, c]
            m1 = m1 / n
            m2 = m2 / n
            for c in range(n):
                dx[r, c] = (g[r, c] * gamma[c] - m1 - xhat[r, c] * m2) * rstd[r]
    return dx_arr, dgamma_arr, dbeta_arr


def gelu_fwd(x_in):
    x_flat = np.ascontiguousarray(x_in).reshape(-1)
    cdef double[::1] x = x_flat
    cdef Py_ssize_t n = x.shape[0], i
    cdef double v
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] y = out
    with nogil:
        for i in range(n):
            v = x[i]
            y[i] = 0.5 * v * (1.0 + _tanh(SQRT_2_OVER_PI * (v + GELU_C * v * v * v)))
    return out.reshape(np.shape(x_in))


def gelu_bwd(x_in, g_in):
    x_flat = np.ascontiguousarray(x_in).reshape(-1)
    g_flat = np.ascontiguousarray(g_in).reshape(-1)
    cdef double[::1] x = x_flat
    cdef double[::1] g = g_flat
    cdef Py_ssize_t n = x.shape[0], i
    cdef double v, t, du
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] dx = out
    with nogil:
        for i in range(n):
            v = x[i]
            t = _tanh(SQRT_2_OVER_PI * (v + GELU_C * v * v * v))
            du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * v * v)
            dx[i] = g[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
    return out.reshape(np.shape(x_in))
