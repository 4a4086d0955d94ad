"""Oracle price series: loading them from CSV and generating synthetic paths."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SIGNAL_NOISE = 0.25


class DataError(ValueError):
    """Malformed or out-of-range market data."""


def normalize_price(price):
    """Map a price of X in Y to the valuation ``P / (1 + P)``."""
    p = np.asarray(price, dtype=float)
    if np.any(~(p > 0)) or np.any(~np.isfinite(p)):
        raise DataError(f"prices must be positive and finite, got {price!r}")
    v = p / (1.0 + p)
    return float(v) if np.ndim(price) == 0 else v


@dataclass(frozen=True)
class PriceTick:
    t: int
    valuation: float
    signal: float

    def __post_init__(self):
        if not 0.0 < self.valuation < 1.0:
            raise DataError(f"valuation={self.valuation} outside (0, 1) at t={self.t}")
        if not -1.0 <= self.signal <= 1.0:
            raise DataError(f"signal={self.signal} outside [-1, 1] at t={self.t}")


@dataclass(frozen=True)
class PriceSeries:
    """Gap-free run of ticks stored column-wise."""

    t: np.ndarray
    v: np.ndarray
    signal: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.int64)
        v = np.asarray(self.v, dtype=float)
        signal = np.asarray(self.signal, dtype=float)
        if t.ndim != 1 or t.size == 0 or v.shape != t.shape or signal.shape != t.shape:
            raise DataError("series needs non-empty, equally sized t / v / signal columns")
        if t[0] < 0 or np.any(np.diff(t) != 1):
            raise DataError("interval indices must climb by exactly one from a non-negative start")
        if np.any(~(v > 0)) or np.any(~(v < 1)):
            raise DataError("valuation outside (0, 1)")
        if np.any(~(signal >= -1)) or np.any(~(signal <= 1)):
            raise DataError("signal outside [-1, 1]")
        for name, arr in (("t", t), ("v", v), ("signal", signal)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self):
        return int(self.t.size)

    @property
    def ticks(self):
        return [PriceTick(int(a), float(b), float(c)) for a, b, c in zip(self.t, self.v, self.signal)]

    def slice(self, start, stop):
        return PriceSeries(self.t[start:stop], self.v[start:stop], self.signal[start:stop], dict(self.metadata))

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "valuation", "signal"])
            for a, b, c in zip(self.t, self.v, self.signal):
                w.writerow([int(a), repr(float(b)), repr(float(c))])


def load_csv(path, price_column=False) -> PriceSeries:
    """Read ``t,valuation,signal`` (or ``t,price,signal`` with ``price_column``)."""
    path = Path(path)
    value_col = "price" if price_column else "valuation"
    expected = ["t", value_col, "signal"]
    ts, vs, signals = [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != expected:
            raise DataError(f"{path}:1: header must be {','.join(expected)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            try:
                t = int(row[0])
                val = float(row[1])
                signal = float(row[2])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if t < 0:
                raise DataError(f"{path}:{lineno}: t must be non-negative")
            if ts and t <= ts[-1]:
                raise DataError(f"{path}:{lineno}: t={t} not increasing (previous {ts[-1]})")
            if ts and t != ts[-1] + 1:
                raise DataError(f"{path}:{lineno}: gap in interval indices after t={ts[-1]}")
            if price_column:
                if not val > 0:
                    raise DataError(f"{path}:{lineno}: price must be positive")
                val = normalize_price(val)
            if not 0.0 < val < 1.0:
                raise DataError(f"{path}:{lineno}: valuation={val} outside (0, 1)")
            if not -1.0 <= signal <= 1.0:
                raise DataError(f"{path}:{lineno}: signal={signal} outside [-1, 1]")
            ts.append(t)
            vs.append(val)
            signals.append(signal)
    if not ts:
        raise DataError(f"{path}: no data rows")
    return PriceSeries(np.array(ts), np.array(vs), np.array(signals), {"source": str(path)})


def _lagged_sign_tau(log_prices, rng):
    ret = np.diff(log_prices, prepend=log_prices[0])
    lagged = np.concatenate([[0.0], ret[:-1]])
    return np.clip(np.sign(lagged) + rng.normal(0.0, SIGNAL_NOISE, size=log_prices.size), -1.0, 1.0)


def synth_gbm(seed, n, mu=0.0, sigma=0.01, p0=1.0) -> PriceSeries:
    """Seeded log-Euler GBM path, normalised to valuations."""
    if n < 2 or sigma < 0 or not p0 > 0:
        raise DataError("synth_gbm needs n >= 2, sigma >= 0, p0 > 0")
    rng = np.random.default_rng(seed)
    steps = (mu - 0.5 * sigma**2) + sigma * rng.standard_normal(n - 1)
    log_p = np.log(p0) + np.concatenate([[0.0], np.cumsum(steps)])
    signal = _lagged_sign_tau(log_p, rng)
    v = normalize_price(np.exp(log_p))
    meta = {"source": "gbm", "seed": seed, "mu": mu, "sigma": sigma, "p0": p0}
    return PriceSeries(np.arange(n), v, signal, meta)


def synth_sine(n, period=200.0, amplitude=0.1, center=0.5) -> PriceSeries:
    """Noiseless sinusoidal valuations; ``signal`` is the cosine of the same phase."""
    if n < 1 or not period > 0:
        raise DataError("synth_sine needs n >= 1 and period > 0")
    if center - abs(amplitude) <= 0.01 or center + abs(amplitude) >= 0.99:
        raise DataError("sine would leave (0.01, 0.99)")
    phase = 2.0 * np.pi * np.arange(n) / period
    v = center + amplitude * np.sin(phase)
    meta = {"source": "sine", "period": period, "amplitude": amplitude, "center": center}
    return PriceSeries(np.arange(n), v, np.cos(phase), meta)
