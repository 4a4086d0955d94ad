"""Gaussian incentive-fee distribution centred on the predicted valuation.

Fees for an interval are split across LP ranges in proportion to
``liquidity * mass of the truncated gaussian inside the range``. Because the
gaussian has full support, every position earns something; positions far
from the centre earn little rather than nothing.
"""
from __future__ import annotations

import bisect
import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import log_ndtr, logsumexp, ndtr

DEFAULT_SIGMA = 0.05
ROLLING_WINDOW = 50
_SQRT_2PI = np.sqrt(2.0 * np.pi)
_TINY = np.nextafter(0.0, 1.0)


@dataclass(frozen=True)
class FeeDistribution:
    mu: float
    sigma: float = DEFAULT_SIGMA

    def __post_init__(self):
        if not self.sigma > 0 or not np.isfinite(self.mu):
            raise ValueError(f"need finite mu and sigma > 0, got {self.mu}, {self.sigma}")

    @property
    def normalizer(self):
        """Mass of the untruncated gaussian on (0, 1)."""
        return float(ndtr((1.0 - self.mu) / self.sigma) - ndtr(-self.mu / self.sigma))

    def pdf(self, x):
        """Density truncated and renormalised to (0, 1)."""
        x = np.asarray(x, dtype=float)
        inside = (x > 0) & (x < 1)
        return np.where(inside, fee_density(self, x) / self.normalizer, 0.0)

    def log_mass(self, lo, hi):
        """log of the truncated mass on ``[lo, hi]``, accurate far into the tails."""
        lo = np.clip(np.asarray(lo, dtype=float), 0.0, 1.0)
        hi = np.clip(np.asarray(hi, dtype=float), 0.0, 1.0)
        a = (lo - self.mu) / self.sigma
        b = (hi - self.mu) / self.sigma
        # work in the lower tail where log_ndtr is precise
        flip = a > 0
        lo_z = np.where(flip, -b, a)
        hi_z = np.where(flip, -a, b)
        with np.errstate(divide="ignore"):
            lb = log_ndtr(hi_z)
            la = log_ndtr(lo_z)
            diff = lb + np.log1p(-np.exp(np.minimum(la - lb, 0.0)))
        diff = np.where(hi_z > lo_z, diff, -np.inf)
        return diff - np.log(self.normalizer)

    def mass(self, lo, hi):
        return np.exp(self.log_mass(lo, hi))


def fee_density(dist: FeeDistribution, x):
    """Untruncated gaussian density at ``x``."""
    z = (np.asarray(x, dtype=float) - dist.mu) / dist.sigma
    return np.exp(-0.5 * z * z) / (dist.sigma * _SQRT_2PI)


def rolling_sigma(history, window=ROLLING_WINDOW, fallback=DEFAULT_SIGMA):
    tail = np.asarray(history, dtype=float)[-window:]
    if tail.size < 2:
        return fallback
    s = float(np.std(tail))
    return s if s > 1e-6 else fallback


@dataclass(frozen=True)
class LPPosition:
    owner: str
    v_lo: float
    v_hi: float
    liquidity: float

    def __post_init__(self):
        if not (0.0 <= self.v_lo < self.v_hi <= 1.0):
            raise ValueError(f"range must satisfy 0 <= lo < hi <= 1, got [{self.v_lo}, {self.v_hi}]")
        if self.liquidity < 0:
            raise ValueError("liquidity must be non-negative")

    def contains(self, v):
        return self.v_lo <= v <= self.v_hi


def tiled_positions(n, liquidity=1.0):
    """``n`` equal-liquidity positions tiling (0, 1) with equal-width ranges."""
    edges = np.linspace(0.0, 1.0, n + 1)
    return [LPPosition(f"lp{i:03d}", float(edges[i]), float(edges[i + 1]), liquidity) for i in range(n)]


@dataclass(frozen=True)
class Allocation:
    amounts: dict
    carried_over: float

    @property
    def distributed(self):
        return float(sum(self.amounts.values()))


def allocate_fees(positions, total_fee, dist: FeeDistribution) -> Allocation:
    """Split ``total_fee`` across positions by liquidity-weighted truncated mass.

    With no overlapping liquidity nothing is paid and the whole fee is
    reported as carried over.
    """
    if total_fee < 0:
        raise ValueError("total fee must be non-negative")
    owners = [p.owner for p in positions]
    amounts = dict.fromkeys(owners, 0.0)
    if not positions:
        return Allocation(amounts, float(total_fee))
    liq = np.array([p.liquidity for p in positions], dtype=float)
    lo = np.array([p.v_lo for p in positions])
    hi = np.array([p.v_hi for p in positions])
    with np.errstate(divide="ignore"):
        logw = np.log(liq) + dist.log_mass(lo, hi)
    if not np.any(np.isfinite(logw)):
        return Allocation(amounts, float(total_fee))
    shares = np.exp(logw - logsumexp(logw[np.isfinite(logw)]))
    shares = np.where(np.isfinite(logw), shares, 0.0)
    paid = total_fee * shares
    # a positive mass can underflow; round it up to the smallest positive amount
    paid = np.where(np.isfinite(logw) & (paid == 0.0) & (total_fee > 0), _TINY, paid)
    for owner, amount in zip(owners, paid):
        amounts[owner] += float(amount)
    return Allocation(amounts, 0.0)


@dataclass
class LogEntry:
    t: int
    forecast: float
    effective_t: int
    realized_v: Optional[float] = None


@dataclass
class PredictionLog:
    """Append-only record of published predictions and their outcomes."""

    entries: list = field(default_factory=list)
    _by_effective: dict = field(default_factory=dict, repr=False)

    def append(self, entry: LogEntry):
        if self.entries and entry.t < self.entries[-1].t:
            raise ValueError(f"log is append-only in time: {entry.t} < {self.entries[-1].t}")
        self.entries.append(entry)
        self._by_effective.setdefault(entry.effective_t, []).append(entry)

    def __len__(self):
        return len(self.entries)

    def record_realized(self, t, v):
        for e in self._by_effective.get(t, ()):
            e.realized_v = float(v)

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "forecast", "effective_t", "realized_v"])
            for e in self.entries:
                realized = "" if e.realized_v is None else repr(e.realized_v)
                w.writerow([e.t, repr(e.forecast), e.effective_t, realized])


@dataclass
class IncentiveSchedule:
    """Fee distributions keyed by the interval at which they take effect.

    A distribution persists until a later one takes over. When two shifts
    target the same interval the later submission wins; both stay logged.
    """

    default: FeeDistribution = field(default_factory=lambda: FeeDistribution(0.5))
    log: PredictionLog = field(default_factory=PredictionLog)
    _scheduled: dict = field(default_factory=dict)
    _keys: list = field(default_factory=list)

    def shift_concentration(self, t, forecast, n, sigma=DEFAULT_SIGMA) -> FeeDistribution:
        if n < 0:
            raise ValueError("lead time must be non-negative")
        dist = FeeDistribution(float(forecast), sigma)
        if t + n not in self._scheduled:
            bisect.insort(self._keys, t + n)
        self._scheduled[t + n] = dist
        self.log.append(LogEntry(int(t), float(forecast), int(t + n)))
        return dist

    def distribution_at(self, t) -> FeeDistribution:
        i = bisect.bisect_right(self._keys, t)
        if i == 0:
            return self.default
        return self._scheduled[self._keys[i - 1]]


def shift_concentration(schedule: IncentiveSchedule, t, forecast, n, sigma=DEFAULT_SIGMA):
    return schedule.shift_concentration(t, forecast, n, sigma)
