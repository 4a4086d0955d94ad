"""Constant-product pool state and the maps between valuations and curve points.

The curve is ``f(x) = c / x``. A curve may carry a translation
``(shift_x, shift_y)`` so that ``g(x) = f(x - shift_x) - shift_y``; the
pseudo-arbitrage rebalancer is the only producer of shifted curves.

Valuations are the weights ``v`` in ``(0, 1)`` with ``v`` worth of X equal to
``1 - v`` worth of Y, so the relative price of X in Y is ``v / (1 - v)``.
All maps below accept floats or numpy arrays.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

REL_TOL = 1e-12
V_MIN = 1e-9
V_MAX = 1.0 - 1e-9

X = "X"
Y = "Y"


class PoolExhausted(ValueError):
    """Raised when a trade would drain a reserve to zero or below."""


@dataclass(frozen=True)
class Valuation:
    v: float

    def __post_init__(self):
        if not (0.0 < self.v < 1.0):
            raise ValueError(f"valuation must lie in (0, 1), got {self.v!r}")

    @property
    def vector(self):
        return np.array([self.v, 1.0 - self.v])

    @property
    def relative_price(self):
        return self.v / (1.0 - self.v)

    def __float__(self):
        return float(self.v)


def _val(v):
    if isinstance(v, Valuation):
        return v.v
    return v


def _check_map_domain(v):
    arr = np.asarray(v, dtype=float)
    if np.any(~np.isfinite(arr)) or np.any(arr < V_MIN) or np.any(arr > V_MAX):
        raise ValueError(f"valuation outside [{V_MIN}, {V_MAX}]: {v!r}")


@dataclass(frozen=True)
class PoolState:
    """Custody amounts of a constant-product pool."""

    x: float
    y: float
    c: float

    def __post_init__(self):
        if not (self.x > 0 and self.y > 0 and self.c > 0):
            raise ValueError(f"pool amounts must be positive: {self}")
        if abs(self.x * self.y - self.c) > REL_TOL * self.c:
            raise ValueError(f"x*y={self.x * self.y!r} does not match c={self.c!r}")

    @classmethod
    def from_reserves(cls, x, y):
        return cls(float(x), float(y), float(x) * float(y))

    @classmethod
    def at_valuation(cls, c, v):
        x, y = equilibrium_state(BondingCurve(c), v)
        return cls(x, c / x, c)

    def value(self, v):
        v = _val(v)
        return v * self.x + (1.0 - v) * self.y


@dataclass(frozen=True)
class BondingCurve:
    """``g(x) = c / (x - shift_x) - shift_y`` (unshifted when both offsets are 0)."""

    c: float
    shift_x: float = 0.0
    shift_y: float = 0.0

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError(f"invariant c must be positive, got {self.c!r}")

    @property
    def is_shifted(self):
        return self.shift_x != 0.0 or self.shift_y != 0.0

    def _inner(self, x):
        u = np.asarray(x, dtype=float) - self.shift_x
        if np.any(u <= 0):
            raise ValueError(f"x={x!r} outside curve domain x > {self.shift_x}")
        return u if np.ndim(x) else float(u)

    def f(self, x):
        return self.c / self._inner(x) - self.shift_y

    def df(self, x):
        u = self._inner(x)
        return -self.c / (u * u)

    def shifted(self, dx, dy):
        """Compose a further translation on top of the existing one."""
        return replace(self, shift_x=self.shift_x + dx, shift_y=self.shift_y + dy)

    def primary(self):
        return BondingCurve(self.c)


def swap(pool: PoolState, side: str, delta_in: float):
    """Deposit ``delta_in`` of token ``side`` and receive the opposite token.

    Returns ``(delta_out, new_pool)``.
    """
    if not delta_in > 0:
        raise ValueError(f"swap input must be positive, got {delta_in!r}")
    if side == X:
        x_new = pool.x + delta_in
        y_new = pool.c / x_new
        return pool.y - y_new, PoolState(x_new, y_new, pool.c)
    if side == Y:
        y_new = pool.y + delta_in
        x_new = pool.c / y_new
        return pool.x - x_new, PoolState(x_new, y_new, pool.c)
    raise ValueError(f"unknown token {side!r}")


def swap_exact_out(pool: PoolState, side_out: str, delta_out: float):
    """Withdraw exactly ``delta_out`` of ``side_out``; returns ``(delta_in, new_pool)``."""
    if not delta_out > 0:
        raise ValueError(f"swap output must be positive, got {delta_out!r}")
    if side_out == X:
        x_new = pool.x - delta_out
        if x_new <= 0:
            raise PoolExhausted(f"buying {delta_out} X would exhaust reserve {pool.x}")
        y_new = pool.c / x_new
        return y_new - pool.y, PoolState(x_new, y_new, pool.c)
    if side_out == Y:
        y_new = pool.y - delta_out
        if y_new <= 0:
            raise PoolExhausted(f"buying {delta_out} Y would exhaust reserve {pool.y}")
        x_new = pool.c / y_new
        return x_new - pool.x, PoolState(x_new, y_new, pool.c)
    raise ValueError(f"unknown token {side_out!r}")


def exchange_rate(curve: BondingCurve, x):
    """Units of Y per unit of X at ``x``: the negated curve slope."""
    return -curve.df(x)


def equilibrium_x(curve: BondingCurve, v):
    """x-coordinate of the point on ``curve`` that minimises ``v x + (1 - v) g(x)``."""
    v = _val(v)
    _check_map_domain(v)
    return curve.shift_x + np.sqrt(curve.c * (1.0 - v) / v)


def equilibrium_state(curve: BondingCurve, v):
    """Equilibrium point ``(x, g(x))`` for valuation ``v``."""
    x = equilibrium_x(curve, v)
    return x, curve.f(x)


def implied_valuation(curve: BondingCurve, x):
    """Valuation for which ``x`` is the equilibrium point (inverse of ``equilibrium_x``)."""
    rate = exchange_rate(curve, x)
    return rate / (1.0 + rate)


def capitalization(curve: BondingCurve, x, v):
    v = _val(v)
    return v * x + (1.0 - v) * curve.f(x)


def equilibrium_capitalization(curve: BondingCurve, v):
    v = _val(v)
    x, y = equilibrium_state(curve, v)
    return v * x + (1.0 - v) * y
