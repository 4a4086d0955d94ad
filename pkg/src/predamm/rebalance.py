"""Pseudo-arbitrage: translate the curve instead of paying arbitrageurs.

When the valuation moves from ``v`` (equilibrium ``(a, b)``) to ``v'``
(equilibrium ``(a', b')``), the curve is moved by ``(a - a', b' - b)`` so the
pool's current holdings become the new equilibrium. The pool then holds
``a - a'`` more X and ``b' - b`` less Y than the primary curve would; those
offsets pile up in an :class:`InventoryLedger` until liquidity providers top
the pool up and it returns to the primary curve.
"""
from __future__ import annotations

from dataclasses import dataclass

from .amm import REL_TOL, BondingCurve, PoolState, _val, equilibrium_state


@dataclass(frozen=True)
class ShiftedPool:
    """Real holdings ``(x, y)`` sitting on a possibly translated curve."""

    x: float
    y: float
    curve: BondingCurve

    def __post_init__(self):
        if not (self.x > 0 and self.y > 0):
            raise ValueError(f"holdings must be positive: ({self.x}, {self.y})")
        if abs(self.curve.f(self.x) - self.y) > 1e-9 * max(1.0, abs(self.y)):
            raise ValueError("holdings are not on the curve")

    @classmethod
    def at_valuation(cls, c, v):
        curve = BondingCurve(c)
        x, y = equilibrium_state(curve, v)
        return cls(float(x), float(y), curve)

    def virtual(self):
        """Equivalent unshifted pool; swaps on it move holdings by the same deltas."""
        c = self.curve.c
        u = self.x - self.curve.shift_x
        return PoolState(u, c / u, c)

    def with_virtual(self, pool: PoolState):
        return ShiftedPool(pool.x + self.curve.shift_x, pool.y - self.curve.shift_y, self.curve)

    def value(self, v):
        v = _val(v)
        return v * self.x + (1.0 - v) * self.y


@dataclass(frozen=True)
class ShiftResult:
    shift_x: float
    shift_y: float
    new_equilibrium: tuple
    curve: BondingCurve


@dataclass(frozen=True)
class InventoryLedger:
    """Cumulative X surplus and Y deficit created by curve shifts."""

    surplus_x: float = 0.0
    deficit_y: float = 0.0
    events: int = 0

    @property
    def is_zero(self):
        return self.surplus_x == 0.0 and self.deficit_y == 0.0


def pseudo_arbitrage_shift(curve: BondingCurve, v, v_new) -> ShiftResult:
    v, v_new = float(_val(v)), float(_val(v_new))
    if v == v_new:
        raise ValueError("pseudo-arbitrage shift needs distinct valuations")
    a, b = equilibrium_state(curve, v)
    a2, b2 = equilibrium_state(curve, v_new)
    dx, dy = float(a - a2), float(b2 - b)
    moved = curve.shifted(dx, dy)
    return ShiftResult(dx, dy, (float(a), float(b)), moved)


def arbitrage_profit(curve: BondingCurve, x, y, v):
    """Value an arbitrageur extracts by moving holdings ``(x, y)`` to the ``v`` equilibrium."""
    v = _val(v)
    ex, ey = equilibrium_state(curve, v)
    return v * x + (1.0 - v) * y - (v * ex + (1.0 - v) * ey)


def accrue_shortfall(ledger: InventoryLedger, shift: ShiftResult) -> InventoryLedger:
    return InventoryLedger(
        ledger.surplus_x + shift.shift_x,
        ledger.deficit_y + shift.shift_y,
        ledger.events + 1,
    )


def needs_rebalance(ledger: InventoryLedger, pool: ShiftedPool, threshold=0.01):
    return abs(ledger.surplus_x) > threshold * pool.x or abs(ledger.deficit_y) > threshold * pool.y


def rebalance_deposit(pool: ShiftedPool, ledger: InventoryLedger, v):
    """Top the pool up so it sits on the primary curve at the equilibrium for ``v``.

    Returns ``((deposit_x, deposit_y), new_pool, cleared_ledger)``. A negative
    deposit is a release of surplus back to liquidity providers.
    """
    if ledger.is_zero and not pool.curve.is_shifted:
        return (0.0, 0.0), pool, ledger
    primary = pool.curve.primary()
    x, y = equilibrium_state(primary, v)
    x, y = float(x), float(primary.c / x)
    new_pool = ShiftedPool(x, y, primary)
    assert abs(x * y - primary.c) <= REL_TOL * primary.c
    return (x - pool.x, y - pool.y), new_pool, InventoryLedger()
