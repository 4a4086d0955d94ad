"""numba-compiled kernels; semantics mirror ``_kernels_np`` exactly."""
import math

import numpy as np
from numba import njit


@njit(cache=True)
def scan_event(values, t0, beta):
    v0 = values[t0]
    upper = v0 * (1.0 + beta)
    lower = v0 * (1.0 - beta)
    for t in range(t0 + 1, values.shape[0]):
        x = values[t]
        if x < lower or x > upper:
            return t - t0
    return -1


@njit(cache=True)
def event_indices(values, beta):
    n = values.shape[0]
    buf = np.empty(n, dtype=np.int64)
    m = 0
    t = 0
    while t < n - 1:
        k = scan_event(values, t, beta)
        if k < 0:
            break
        t += k
        buf[m] = t
        m += 1
    return buf[:m].copy()


@njit(cache=True)
def _load_x_scalar(c, v, a, b, w):
    aw = math.sqrt(c * (1.0 - w) / w)
    bw = c / aw
    div = w * a + (1.0 - w) * b - (w * aw + (1.0 - w) * bw)
    slip = (1.0 - w) / (1.0 - v) * (v * aw + (1.0 - v) * bw - (v * a + (1.0 - v) * b))
    return div * slip


@njit(cache=True)
def load_x(c, v, w):
    a = math.sqrt(c * (1.0 - v) / v)
    b = c / a
    out = np.empty(w.shape[0])
    for i in range(w.shape[0]):
        out[i] = _load_x_scalar(c, v, a, b, w[i])
    return out


@njit(cache=True)
def simpson_sum(y, h):
    n = y.shape[0] - 1
    acc = y[0] + y[n]
    for i in range(1, n):
        acc += (4.0 if i % 2 == 1 else 2.0) * y[i]
    return h / 3.0 * acc


@njit(cache=True)
def load_branch_integral(c, v, s, w, pdf, mirrored):
    vv = 1.0 - v if mirrored else v
    a = math.sqrt(c * (1.0 - vv) / vv)
    b = c / a
    n = s.shape[0] - 1
    h = (s[n] - s[0]) / n
    acc = 0.0
    for i in range(n + 1):
        ww = 1.0 - w[i] if mirrored else w[i]
        y = pdf[i] * _load_x_scalar(c, vv, a, b, ww) * 2.0 * s[i]
        if i == 0 or i == n:
            acc += y
        elif i % 2 == 1:
            acc += 4.0 * y
        else:
            acc += 2.0 * y
    return h / 3.0 * acc
