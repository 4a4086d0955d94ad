"""LSTM forecaster of the forward equilibrium valuation.

Input rows are ``(valuation, signal, nudge)`` over a sliding window; the output is a
logistic head so predictions stay inside ``(0, 1)``. Training minimises the
mean absolute forecast error; the expected-load term of the training loss
does not depend on the parameters, so it is reported but never differentiated.
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass

import numpy as np

from .amm import BondingCurve, equilibrium_x, implied_valuation
from .losses import ValuationDensity, expected_load
from .market_data import PriceSeries
from .neural import LSTM, Adam, Dense, load_checkpoint, save_checkpoint, sigmoid

N_FEATURES = 3
_UNIT = BondingCurve(1.0)


@dataclass(frozen=True)
class PredictorConfig:
    window: int = 50
    hidden: int = 100
    horizon: int = 5
    epochs: int = 50
    batch: int = 50
    lr: float = 1e-3
    lr_decay: float = 0.9
    ema_decay: float = 0.99
    seed: int = 0

    def __post_init__(self):
        if not self.window >= self.horizon >= 1:
            raise ValueError(f"need window >= horizon >= 1, got {self.window}, {self.horizon}")
        if self.hidden < 1 or self.epochs < 0 or self.batch < 1 or not self.lr > 0 \
                or not 0 < self.lr_decay <= 1 or not 0 <= self.ema_decay < 1:
            raise ValueError("invalid predictor hyperparameters")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    mean_abs_err: float
    mean_expected_load: float

    @property
    def objective(self):
        return self.mean_abs_err + self.mean_expected_load


def make_window(series: PriceSeries, nudge_history, t, window=50):
    """Feature rows for intervals ``t - window + 1 .. t``; missing nudges default to 0."""
    if t < window - 1 or t >= len(series):
        raise ValueError(f"t={t} needs {window} intervals of history inside the series")
    lo = t - window + 1
    out = np.zeros((window, N_FEATURES))
    out[:, 0] = series.v[lo: t + 1]
    out[:, 1] = series.signal[lo: t + 1]
    if nudge_history is not None:
        if isinstance(nudge_history, dict):
            for k in range(lo, t + 1):
                out[k - lo, 2] = nudge_history.get(k, 0.0)
        else:
            out[:, 2] = np.asarray(nudge_history, dtype=float)[lo: t + 1]
    return out


def equilibrium_target(valuation):
    """Equilibrium valuation of an observed valuation via the curve maps."""
    return implied_valuation(_UNIT, equilibrium_x(_UNIT, valuation))


def window_volatility(v):
    """Per-interval std of log-price changes inside a window of valuations."""
    lp = np.log(v / (1.0 - v))
    return float(np.std(np.diff(lp))) if v.size > 2 else 0.0


def expected_load_at(v_next, sigma, horizon):
    density = ValuationDensity.gbm(v_next, 0.0, sigma, horizon)
    return expected_load(_UNIT, v_next, density)


class Predictor:
    def __init__(self, config: PredictorConfig = PredictorConfig()):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.lstm = LSTM(N_FEATURES, config.hidden, rng=rng)
        self.head = Dense(config.hidden, 1, rng=rng)
        self.feature_mean = np.zeros(N_FEATURES)
        self.feature_scale = np.ones(N_FEATURES)
        self.adam = Adam(lr=config.lr)
        self.epochs_done = 0
        # weight average, zero-started and bias-corrected like Adam's moments
        self.ema = {k: np.zeros_like(v) for k, v in self.params.items()}

    @property
    def params(self):
        out = {f"lstm.{k}": v for k, v in self.lstm.params.items()}
        out.update({f"head.{k}": v for k, v in self.head.params.items()})
        return out

    @property
    def grads(self):
        out = {f"lstm.{k}": v for k, v in self.lstm.grads.items()}
        out.update({f"head.{k}": v for k, v in self.head.grads.items()})
        return out

    def fit_normalisation(self, windows):
        flat = windows.reshape(-1, N_FEATURES)
        self.feature_mean = flat.mean(axis=0)
        self.feature_mean[2] = 0.0
        scale = flat.std(axis=0)
        self.feature_scale = np.where(scale > 1e-12, scale, 1.0)
        self.feature_scale[2] = 1.0

    def _logits(self, windows):
        x = (windows - self.feature_mean) / self.feature_scale
        hs = self.lstm.forward(x)
        return self.head.forward(hs[:, -1])[:, 0]

    def averaged_params(self):
        steps = self.adam.t
        if self.config.ema_decay == 0 or steps == 0:
            return {k: p.copy() for k, p in self.params.items()}
        corr = 1.0 - self.config.ema_decay ** steps
        return {k: self.ema[k] / corr for k in self.params}

    def _swap(self, replacement):
        saved = {}
        for k, p in self.params.items():
            saved[k] = p.copy()
            p[...] = replacement[k]
        return saved

    def predict_batch(self, windows):
        """Predictions from the weight average (the raw weights when averaging is off)."""
        windows = np.asarray(windows, dtype=float)
        if windows.ndim == 2:
            windows = windows[None]
        if self.config.ema_decay == 0 or self.adam.t == 0:
            return sigmoid(self._logits(windows))
        saved = self._swap(self.averaged_params())
        try:
            return sigmoid(self._logits(windows))
        finally:
            self._swap(saved)

    def predict(self, window):
        return float(self.predict_batch(window)[0])

    def loss_and_grads(self, xb, yb):
        """Mean absolute error of the raw network and its parameter gradients."""
        z = self._logits(xb)
        p = sigmoid(z)
        err = p - yb
        # subgradient of |.| taken as 0 at 0
        dz = np.sign(err) * p * (1.0 - p) / err.size
        dh_last = self.head.backward(dz[:, None])
        dhs = np.zeros(self.lstm._hs.shape)
        dhs[:, -1] = dh_last
        self.lstm.backward(dhs)
        return float(np.mean(np.abs(err))), self.grads

    def _train_batch(self, xb, yb):
        _, grads = self.loss_and_grads(xb, yb)
        params = self.params
        self.adam.step(params, grads)
        d = self.config.ema_decay
        for k, p in params.items():
            self.ema[k] = d * self.ema[k] + (1.0 - d) * p

    def arrays(self):
        out = dict(self.params)
        out["norm.mean"] = self.feature_mean
        out["norm.scale"] = self.feature_scale
        out.update({f"ema.{k}": v for k, v in self.ema.items()})
        out.update(self.adam.state_arrays())
        return out

    def save(self, path):
        meta = {"kind": "predictor", "config": asdict(self.config),
                "adam_t": self.adam.t, "epochs_done": self.epochs_done}
        save_checkpoint(path, self.arrays(), meta)

    @classmethod
    def load(cls, path):
        arrays, meta = load_checkpoint(path)
        if meta.get("kind") != "predictor":
            raise ValueError(f"{path} is not a predictor checkpoint")
        model = cls(PredictorConfig(**meta["config"]))
        for k, p in model.params.items():
            if arrays[k].shape != p.shape:
                raise ValueError(f"checkpoint shape mismatch for {k}")
            p[...] = arrays[k]
        model.ema = {k: arrays[f"ema.{k}"].copy() for k in model.params}
        model.feature_mean = arrays["norm.mean"]
        model.feature_scale = arrays["norm.scale"]
        model.adam.load_state(arrays, meta["adam_t"])
        model.epochs_done = int(meta["epochs_done"])
        return model


@dataclass
class Dataset:
    windows: np.ndarray
    targets: np.ndarray
    loads: np.ndarray
    times: np.ndarray


def build_dataset(series: PriceSeries, config: PredictorConfig, nudge_history=None):
    w, h = config.window, config.horizon
    if len(series) < w + h:
        raise ValueError(f"series of {len(series)} ticks is shorter than window + horizon = {w + h}")
    times = np.arange(w - 1, len(series) - h)
    windows = np.stack([make_window(series, nudge_history, t, w) for t in times])
    targets = equilibrium_target(series.v[times + h])
    loads = np.array([
        expected_load_at(float(tv), window_volatility(win[:, 0]), h)
        for tv, win in zip(targets, windows)
    ])
    return Dataset(windows, targets, loads, times)


def evaluate(model: Predictor, data: Dataset, epoch: int) -> EpochStats:
    pred = model.predict_batch(data.windows)
    return EpochStats(epoch, float(np.mean(np.abs(data.targets - pred))), float(np.mean(data.loads)))


def train_supervised(model: Predictor, series: PriceSeries, config: PredictorConfig = None,
                     epochs=None, data: Dataset = None, on_epoch=None):
    """Train until ``model.epochs_done`` reaches ``epochs`` (default: the config's).

    Returns one :class:`EpochStats` per completed epoch, preceded by the
    untrained evaluation (epoch 0) when starting fresh. Batches are shuffled
    with a generator seeded by ``(seed, epoch)`` so a resumed run continues
    exactly where an uninterrupted one would.
    """
    config = config or model.config
    target_epochs = config.epochs if epochs is None else epochs
    data = data if data is not None else build_dataset(series, config)
    if model.epochs_done == 0:
        model.fit_normalisation(data.windows)
    history = []
    if model.epochs_done == 0:
        history.append(evaluate(model, data, 0))
    n = data.targets.size
    while model.epochs_done < target_epochs:
        epoch = model.epochs_done + 1
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        model.adam.lr = config.lr * config.lr_decay ** (epoch - 1)
        for start in range(0, n, config.batch):
            idx = order[start: start + config.batch]
            model._train_batch(data.windows[idx], data.targets[idx])
        model.epochs_done = epoch
        stats = evaluate(model, data, epoch)
        history.append(stats)
        if on_epoch is not None:
            on_epoch(stats)
    return history


def write_curve_csv(path, history):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_abs_err", "mean_expected_load", "objective"])
        for s in history:
            w.writerow([s.epoch, repr(s.mean_abs_err), repr(s.mean_expected_load), repr(s.objective)])
