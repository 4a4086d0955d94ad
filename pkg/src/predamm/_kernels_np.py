"""Pure-numpy reference versions of the hot kernels.

Every function here has a numba twin in ``_kernels_nb`` with the same
signature; ``predamm.kernels`` picks one of the two at import time.
"""
import numpy as np


def scan_event(values, t0, beta):
    v0 = values[t0]
    upper = v0 * (1.0 + beta)
    lower = v0 * (1.0 - beta)
    n = values.shape[0]
    start, chunk = t0 + 1, 64
    # doubling chunks keep repeated scans linear overall
    while start < n:
        tail = values[start: start + chunk]
        outside = np.flatnonzero((tail < lower) | (tail > upper))
        if outside.size:
            return int(outside[0]) + start - t0
        start += chunk
        chunk *= 2
    return -1


def event_indices(values, beta):
    out = []
    t = 0
    n = values.shape[0]
    while t < n - 1:
        k = scan_event(values, t, beta)
        if k < 0:
            break
        t += k
        out.append(t)
    return np.asarray(out, dtype=np.int64)


def load_x(c, v, w):
    """load_X(v, w) on the curve c/x, vectorised over ``w``."""
    a = np.sqrt(c * (1.0 - v) / v)
    b = c / a
    aw = np.sqrt(c * (1.0 - w) / w)
    bw = c / aw
    div = w * a + (1.0 - w) * b - (w * aw + (1.0 - w) * bw)
    slip = (1.0 - w) / (1.0 - v) * (v * aw + (1.0 - v) * bw - (v * a + (1.0 - v) * b))
    return div * slip


def simpson_sum(y, h):
    return h / 3.0 * (y[0] + y[-1] + 4.0 * y[1:-1:2].sum() + 2.0 * y[2:-1:2].sum())


def load_branch_integral(c, v, s, w, pdf, mirrored):
    """Simpson integral of pdf(w) * load(v, w) * dw/ds over the uniform grid ``s``.

    ``w = s**2`` on the lower branch and ``w = 1 - s**2`` on the mirrored one,
    so the Jacobian is ``2 s`` either way.
    """
    if mirrored:
        vals = load_x(c, 1.0 - v, 1.0 - w)
    else:
        vals = load_x(c, v, w)
    y = pdf * vals * 2.0 * s
    h = (s[-1] - s[0]) / (s.shape[0] - 1)
    return simpson_sum(y, h)
