"""Small double-precision neural toolkit with hand-written backward passes.

Layers share one protocol: ``params`` and ``grads`` dicts of arrays (same
keys), ``forward(x)`` caching what ``backward(dy)`` needs, and ``backward``
returning the input gradient while *overwriting* ``grads``.

Checkpoint layout
-----------------
A checkpoint is a numpy ``.npz`` archive. Each parameter is stored under its
dotted name (``"lstm.Wx"``, ``"adam.m.lstm.Wx"``, ...) as a float64 array in
C (row-major) order; the archive records its shape. Three reserved entries
describe the file: ``__format__`` (the string ``"predamm-checkpoint"``),
``__version__`` (integer, currently 1) and ``__meta__`` (a JSON document with
configuration and counters). Unknown versions are rejected on load.
"""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field

import numpy as np

CHECKPOINT_FORMAT = "predamm-checkpoint"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


def leaky_relu(x, slope=0.01):
    return np.where(x >= 0, x, slope * x)


def leaky_relu_grad(x, slope=0.01):
    return np.where(x >= 0, 1.0, slope)


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def glorot(rng, fan_in, fan_out, shape):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _activate(z, activation):
    if activation == "linear":
        return z
    if activation == "leaky-relu":
        return leaky_relu(z)
    raise ValueError(f"unknown activation {activation!r}")


def _activation_grad(z, dy, activation):
    if activation == "linear":
        return dy
    return dy * leaky_relu_grad(z)


class Layer:
    params: dict
    grads: dict

    def zero_grads(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)


class Dense(Layer):
    """``y = act(x @ W.T + b)`` with ``W`` of shape (out, in)."""

    def __init__(self, n_in, n_out, activation="linear", rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.activation = activation
        self.params = {
            "W": glorot(rng, n_in, n_out, (n_out, n_in)),
            "b": np.zeros(n_out),
        }
        self.grads = {}
        self.zero_grads()

    def forward(self, x):
        W = self.params["W"]
        if x.shape[-1] != W.shape[1]:
            raise ShapeError(f"dense expects last dim {W.shape[1]}, got {x.shape}")
        self._x = x
        self._z = x @ W.T + self.params["b"]
        return _activate(self._z, self.activation)

    def backward(self, dy):
        dz = _activation_grad(self._z, dy, self.activation)
        x2 = self._x.reshape(-1, self._x.shape[-1])
        dz2 = dz.reshape(-1, dz.shape[-1])
        self.grads["W"] = dz2.T @ x2
        self.grads["b"] = dz2.sum(axis=0)
        return dz @ self.params["W"]


class LeakyReLU(Layer):
    def __init__(self, slope=0.01):
        self.slope = slope
        self.params, self.grads = {}, {}

    def forward(self, x):
        self._x = x
        return leaky_relu(x, self.slope)

    def backward(self, dy):
        return dy * leaky_relu_grad(self._x, self.slope)


class LSTM(Layer):
    """Single LSTM layer over ``(batch, time, features)`` inputs.

    Gate blocks in ``Wx``/``Wh``/``b`` are ordered input, forget, output,
    candidate. ``forward`` returns every hidden state, shape
    ``(batch, time, hidden)``.
    """

    def __init__(self, n_in, hidden, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.hidden = hidden
        self.params = {
            "Wx": glorot(rng, n_in, 4 * hidden, (n_in, 4 * hidden)),
            "Wh": glorot(rng, hidden, 4 * hidden, (hidden, 4 * hidden)),
            "b": np.zeros(4 * hidden),
        }
        self.grads = {}
        self.zero_grads()

    @property
    def n_in(self):
        return self.params["Wx"].shape[0]

    def forward(self, x, h0=None, c0=None):
        if x.ndim != 3 or x.shape[2] != self.n_in:
            raise ShapeError(f"LSTM expects (batch, time, {self.n_in}), got {x.shape}")
        n, steps, _ = x.shape
        H = self.hidden
        Wx, Wh, b = self.params["Wx"], self.params["Wh"], self.params["b"]
        h = np.zeros((n, H)) if h0 is None else h0
        c = np.zeros((n, H)) if c0 is None else c0
        self._h0, self._c0 = h, c
        gates = np.empty((n, steps, 4 * H))
        hs = np.empty((n, steps, H))
        cs = np.empty((n, steps, H))
        xw = x @ Wx + b
        for t in range(steps):
            z = xw[:, t] + h @ Wh
            ifo = sigmoid(z[:, : 3 * H])
            g = np.tanh(z[:, 3 * H:])
            gates[:, t, : 3 * H] = ifo
            gates[:, t, 3 * H:] = g
            c = ifo[:, H: 2 * H] * c + ifo[:, :H] * g
            h = ifo[:, 2 * H: 3 * H] * np.tanh(c)
            hs[:, t] = h
            cs[:, t] = c
        self._x, self._gates, self._hs, self._cs = x, gates, hs, cs
        return hs

    def backward(self, dhs):
        x, gates, hs, cs = self._x, self._gates, self._hs, self._cs
        n, steps, _ = x.shape
        H = self.hidden
        Wx, Wh = self.params["Wx"], self.params["Wh"]
        dz_all = np.empty((n, steps, 4 * H))
        dh_next = np.zeros((n, H))
        dc_next = np.zeros((n, H))
        for t in range(steps - 1, -1, -1):
            i = gates[:, t, :H]
            f = gates[:, t, H: 2 * H]
            o = gates[:, t, 2 * H: 3 * H]
            g = gates[:, t, 3 * H:]
            c_prev = cs[:, t - 1] if t > 0 else self._c0
            tc = np.tanh(cs[:, t])
            dh = dhs[:, t] + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dz = dz_all[:, t]
            dz[:, :H] = dc * g * i * (1.0 - i)
            dz[:, H: 2 * H] = dc * c_prev * f * (1.0 - f)
            dz[:, 2 * H: 3 * H] = dh * tc * o * (1.0 - o)
            dz[:, 3 * H:] = dc * i * (1.0 - g * g)
            dc_next = dc * f
            dh_next = dz @ Wh.T
        h_prev = np.concatenate([self._h0[:, None, :], hs[:, :-1]], axis=1)
        self.grads["Wx"] = x.reshape(-1, x.shape[2]).T @ dz_all.reshape(-1, 4 * H)
        self.grads["Wh"] = h_prev.reshape(-1, H).T @ dz_all.reshape(-1, 4 * H)
        self.grads["b"] = dz_all.sum(axis=(0, 1))
        self.dh0, self.dc0 = dh_next, dc_next
        return dz_all @ Wx.T


def lstm_step(cell: LSTM, x_t, h_prev, c_prev):
    """One recurrence step for single vectors; returns ``(h_t, c_t)``."""
    x_t, h_prev, c_prev = (np.atleast_1d(np.asarray(a, dtype=float)) for a in (x_t, h_prev, c_prev))
    H = cell.hidden
    if x_t.shape != (cell.n_in,) or h_prev.shape != (H,) or c_prev.shape != (H,):
        raise ShapeError("lstm_step shape mismatch")
    z = x_t @ cell.params["Wx"] + h_prev @ cell.params["Wh"] + cell.params["b"]
    i, f, o = sigmoid(z[:H]), sigmoid(z[H: 2 * H]), sigmoid(z[2 * H: 3 * H])
    g = np.tanh(z[3 * H:])
    c = f * c_prev + i * g
    return o * np.tanh(c), c


class Conv1D(Layer):
    """Stride-1, same-padded 1-D convolution over ``(batch, time, channels)``."""

    def __init__(self, n_in, filters=100, kernel=3, activation="linear", rng=None):
        if kernel % 2 != 1:
            raise ValueError("same padding needs an odd kernel")
        rng = np.random.default_rng(0) if rng is None else rng
        self.kernel = kernel
        self.activation = activation
        self.params = {
            "W": glorot(rng, n_in * kernel, filters, (kernel, n_in, filters)),
            "b": np.zeros(filters),
        }
        self.grads = {}
        self.zero_grads()

    def _cols(self, x):
        pad = self.kernel // 2
        n, steps, ch = x.shape
        xp = np.zeros((n, steps + 2 * pad, ch))
        xp[:, pad: pad + steps] = x
        return np.concatenate([xp[:, k: k + steps] for k in range(self.kernel)], axis=2)

    def forward(self, x):
        k, ch, filters = self.params["W"].shape
        if x.ndim != 3 or x.shape[2] != ch:
            raise ShapeError(f"conv expects (batch, time, {ch}), got {x.shape}")
        self._shape = x.shape
        self._cols_x = self._cols(x)
        self._z = self._cols_x @ self.params["W"].reshape(k * ch, filters) + self.params["b"]
        return _activate(self._z, self.activation)

    def backward(self, dy):
        k, ch, filters = self.params["W"].shape
        n, steps, _ = self._shape
        dz = _activation_grad(self._z, dy, self.activation)
        dz2 = dz.reshape(-1, filters)
        self.grads["W"] = (self._cols_x.reshape(-1, k * ch).T @ dz2).reshape(k, ch, filters)
        self.grads["b"] = dz2.sum(axis=0)
        dcols = (dz @ self.params["W"].reshape(k * ch, filters).T).reshape(n, steps, k, ch)
        pad = k // 2
        dxp = np.zeros((n, steps + 2 * pad, ch))
        for j in range(k):
            dxp[:, j: j + steps] += dcols[:, :, j]
        return dxp[:, pad: pad + steps]


class TimeMean(Layer):
    """Average over the time axis: ``(batch, time, f) -> (batch, f)``."""

    def __init__(self):
        self.params, self.grads = {}, {}

    def forward(self, x):
        self._steps = x.shape[1]
        return x.mean(axis=1)

    def backward(self, dy):
        return np.repeat(dy[:, None, :] / self._steps, self._steps, axis=1)


class LastStep(Layer):
    def __init__(self):
        self.params, self.grads = {}, {}

    def forward(self, x):
        self._shape = x.shape
        return x[:, -1]

    def backward(self, dy):
        dx = np.zeros(self._shape)
        dx[:, -1] = dy
        return dx


class Sequential(Layer):
    def __init__(self, layers, names=None):
        self.layers = list(layers)
        self.names = list(names) if names else [str(i) for i in range(len(self.layers))]

    @property
    def params(self):
        return {f"{n}.{k}": v for n, l in zip(self.names, self.layers) for k, v in l.params.items()}

    @property
    def grads(self):
        return {f"{n}.{k}": v for n, l in zip(self.names, self.layers) for k, v in l.grads.items()}

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy


@dataclass
class Adam:
    """Bias-corrected Adam with per-parameter moment buffers keyed by name."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params, grads):
        """Update ``params`` in place from ``grads``."""
        if params.keys() != grads.keys():
            raise ShapeError("parameter and gradient names differ")
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, p in params.items():
            g = grads[k]
            if g.shape != p.shape:
                raise ShapeError(f"gradient for {k} has shape {g.shape}, expected {p.shape}")
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            p -= self.lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)

    def state_arrays(self, prefix="adam"):
        out = {f"{prefix}.m.{k}": a for k, a in self.m.items()}
        out.update({f"{prefix}.v.{k}": a for k, a in self.v.items()})
        return out

    def load_state(self, arrays, t, prefix="adam"):
        self.t = int(t)
        self.m = {k[len(prefix) + 3:]: a.copy() for k, a in arrays.items() if k.startswith(f"{prefix}.m.")}
        self.v = {k[len(prefix) + 3:]: a.copy() for k, a in arrays.items() if k.startswith(f"{prefix}.v.")}


def adam_update(state: Adam, params, grads):
    state.step(params, grads)
    return params, state


@dataclass
class GradCheckReport:
    errors: dict
    tolerance: float

    @property
    def max_error(self):
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self):
        return self.max_error < self.tolerance

    def failing(self):
        return {k: e for k, e in self.errors.items() if e >= self.tolerance}


def mse_loss(y, target):
    diff = y - target
    return 0.5 * float(np.mean(diff * diff)), diff / diff.size


def grad_check(model, x, target, tolerance=1e-4, step=1e-5, loss=mse_loss,
               max_coords=None, rng=None, floor=1e-8):
    """Compare analytic gradients with central finite differences.

    ``model`` follows the layer protocol. With ``max_coords`` only that many
    randomly chosen coordinates per parameter block are perturbed.
    Relative error per coordinate is ``|a - n| / max(|a| + |n|, floor)``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    y = model.forward(x)
    _, dy = loss(y, target)
    model.backward(dy)
    analytic = {k: g.copy() for k, g in model.grads.items()}
    errors = {}
    for name, p in model.params.items():
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        a = analytic[name].reshape(-1)
        worst = 0.0
        for i in idx:
            old = flat[i]
            flat[i] = old + step
            lp, _ = loss(model.forward(x), target)
            flat[i] = old - step
            lm, _ = loss(model.forward(x), target)
            flat[i] = old
            num = (lp - lm) / (2.0 * step)
            err = abs(a[i] - num) / max(abs(a[i]) + abs(num), floor)
            worst = max(worst, err)
        errors[name] = worst
    return GradCheckReport(errors, tolerance)


def save_checkpoint(path, arrays, meta=None):
    payload = {k: np.ascontiguousarray(v, dtype=np.float64) for k, v in arrays.items()}
    payload["__format__"] = np.array(CHECKPOINT_FORMAT)
    payload["__version__"] = np.array(CHECKPOINT_VERSION)
    payload["__meta__"] = np.array(json.dumps(meta or {}, sort_keys=True))
    # fixed zip timestamps keep identical checkpoints byte-identical
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(payload):
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(payload[name]), allow_pickle=False)
            zf.writestr(info, buf.getvalue())


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as data:
        if "__format__" not in data.files or str(data["__format__"]) != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not a predamm checkpoint")
        version = int(data["__version__"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        meta = json.loads(str(data["__meta__"]))
        arrays = {k: data[k].copy() for k in data.files if not k.startswith("__")}
    return arrays, meta
