"""Divergence and slippage losses, plus their product averaged over future valuations.

Every loss is expressed through equilibrium points of a curve, so the same
functions serve the primary curve and pseudo-arbitrage-shifted curves.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.special import ndtr

from . import kernels
from .amm import BondingCurve, _val, equilibrium_state

SUPPORT_EPS = 1e-4
PANELS = 2048
_SQRT_2PI = np.sqrt(2.0 * np.pi)


def _dot_eq(curve, weight, v):
    x, y = equilibrium_state(curve, v)
    return weight * x + (1.0 - weight) * y


def divergence_loss(curve: BondingCurve, v, v_new):
    """Arbitrage profit available when the valuation moves ``v -> v_new``."""
    v, v_new = _val(v), _val(v_new)
    return _dot_eq(curve, v_new, v) - _dot_eq(curve, v_new, v_new)


def slippage_loss(curve: BondingCurve, v, v_new):
    v, v_new = _val(v), _val(v_new)
    scale = (1.0 - v_new) / (1.0 - v)
    return scale * (_dot_eq(curve, v, v_new) - _dot_eq(curve, v, v))


def divergence_loss_closed(x, delta):
    """Closed form on the unit curve ``1/x`` for a move from ``x`` to ``x + delta``."""
    if not (x > 0 and x + delta > 0):
        raise ValueError(f"need x > 0 and x + delta > 0, got x={x!r}, delta={delta!r}")
    return delta**2 / (2 * delta * x**2 + x**3 + delta**2 * x + x)


def slippage_loss_closed(x, delta):
    """Closed form on the unit curve, carrying the printed leading minus sign.

    Its magnitude equals ``slippage_loss`` between the implied valuations of
    ``x`` and ``x + delta``; callers wanting a cost use ``abs``.
    """
    if not (x > 0 and x + delta > 0):
        raise ValueError(f"need x > 0 and x + delta > 0, got x={x!r}, delta={delta!r}")
    return -(delta**2) * (delta + x) / (x**2 * (delta**2 + x**2 + 2 * delta * x + 1))


def linear_slippage(curve: BondingCurve, x, delta):
    """Shortfall of a curve trade of ``delta`` X against the tangent-line quote."""
    if not (x > curve.shift_x and delta > 0):
        raise ValueError(f"need x in domain and delta > 0, got x={x!r}, delta={delta!r}")
    linear = -delta * curve.df(x)
    received = curve.f(x) - curve.f(x + delta)
    return linear - received


def load(curve: BondingCurve, v, v_new, direction="X"):
    """Product of divergence and slippage losses over the interval ``v -> v_new``.

    The Y direction is the same quantity on the token-relabelled pool, i.e.
    with both valuations reflected through 1/2. For the primary curve ``c/x``
    relabelling leaves the curve unchanged; a shifted curve is relabelled by
    swapping its offsets.
    """
    v, v_new = _val(v), _val(v_new)
    if direction == "X":
        return divergence_loss(curve, v, v_new) * slippage_loss(curve, v, v_new)
    if direction == "Y":
        mirrored = BondingCurve(curve.c, -curve.shift_y, -curve.shift_x)
        return load(mirrored, 1.0 - v, 1.0 - v_new, "X")
    raise ValueError(f"direction must be 'X' or 'Y', got {direction!r}")


@dataclass(frozen=True)
class ValuationDensity:
    """Density over future valuations, renormalised on ``[eps, 1 - eps]``.

    Build one with :meth:`uniform`, :meth:`truncated_gaussian`, :meth:`gbm`
    or :meth:`custom`.
    """

    kind: str
    params: tuple
    eps: float = SUPPORT_EPS
    _pdf: Optional[Callable] = None

    @classmethod
    def uniform(cls, eps=SUPPORT_EPS):
        return cls("uniform", (), eps)

    @classmethod
    def truncated_gaussian(cls, mean, width, eps=SUPPORT_EPS):
        if not width > 0:
            raise ValueError(f"width must be positive, got {width!r}")
        return cls("truncated-gaussian", (float(mean), float(width)), eps)

    @classmethod
    def gbm(cls, v0, mu, sigma, horizon, eps=SUPPORT_EPS):
        """Valuation law after ``horizon`` steps of GBM on the price ``v0 / (1 - v0)``.

        The log-price is normal, so ``logit(v)`` is normal too. A zero spread
        collapses to a narrow gaussian in logit space.
        """
        v0 = _val(v0)
        if not 0 < v0 < 1 or horizon < 0 or sigma < 0:
            raise ValueError("need v0 in (0,1), sigma >= 0, horizon >= 0")
        m = np.log(v0 / (1.0 - v0)) + (mu - 0.5 * sigma**2) * horizon
        s = max(sigma * np.sqrt(horizon), 1e-9)
        return cls("discretized-GBM", (float(m), float(s)), eps)

    @classmethod
    def custom(cls, pdf, eps=SUPPORT_EPS):
        """Wrap an arbitrary pdf on ``[eps, 1 - eps]``; it must already integrate to 1."""
        return cls("custom", (), eps, pdf)

    def _raw(self, w):
        w = np.asarray(w, dtype=float)
        if self.kind == "uniform":
            return np.ones_like(w)
        if self.kind == "truncated-gaussian":
            mean, width = self.params
            z = (w - mean) / width
            return np.exp(-0.5 * z * z) / (width * _SQRT_2PI)
        if self.kind == "discretized-GBM":
            m, s = self.params
            z = (np.log(w / (1.0 - w)) - m) / s
            return np.exp(-0.5 * z * z) / (s * _SQRT_2PI * w * (1.0 - w))
        return np.asarray(self._pdf(w), dtype=float)

    def raw_mass(self):
        """Mass of the un-renormalised law on the clipped support."""
        lo, hi = self.eps, 1.0 - self.eps
        if self.kind == "uniform":
            return hi - lo
        if self.kind == "truncated-gaussian":
            mean, width = self.params
            return ndtr((hi - mean) / width) - ndtr((lo - mean) / width)
        if self.kind == "discretized-GBM":
            m, s = self.params
            return ndtr((np.log(hi / lo) - m) / s) - ndtr((np.log(lo / hi) - m) / s)
        grid = np.linspace(lo, hi, 2**14 + 1)
        return kernels.simpson_sum(self._raw(grid), (hi - lo) / 2**14)

    def pdf(self, w):
        if self.kind == "custom":
            return self._raw(w)
        mass = self.raw_mass()
        if not mass > 0:
            raise ValueError(f"density {self.kind} has no mass on the clipped support")
        return self._raw(w) / mass

    def is_normalized(self, tol=1e-6):
        if self.kind == "custom":
            return abs(self.raw_mass() - 1.0) < tol
        return self.raw_mass() > 0


def _branch_grids(v, eps, panels):
    lo = np.linspace(np.sqrt(eps), np.sqrt(v), panels + 1)
    hi = np.linspace(np.sqrt(eps), np.sqrt(1.0 - v), panels + 1)
    return lo, lo * lo, hi, 1.0 - hi * hi


def expected_load(curve: BondingCurve, v, density: ValuationDensity, panels=PANELS):
    """Expected load for a pool resting at the equilibrium for ``v``.

    Valuations below ``v`` use the X-direction load and those above use the
    Y-direction load. Each branch is integrated with composite Simpson over
    ``panels`` panels in a square-root coordinate (``w = s**2`` below ``v``,
    ``1 - w = s**2`` above) that absorbs the ``1/sqrt`` growth of the load
    near the edges of the support.
    """
    v = float(_val(v))
    if panels % 2:
        raise ValueError("Simpson needs an even panel count")
    if not density.is_normalized():
        raise ValueError("density does not integrate to 1 on its support")
    eps = density.eps
    if not eps < v < 1.0 - eps:
        raise ValueError(f"v={v} outside density support [{eps}, {1 - eps}]")
    if curve.is_shifted:
        # translations do not change divergence or slippage; losses depend on c only
        curve = curve.primary()
    s_lo, w_lo, s_hi, w_hi = _branch_grids(v, eps, panels)
    below = kernels.load_branch_integral(curve.c, v, s_lo, w_lo, density.pdf(w_lo), False)
    above = kernels.load_branch_integral(curve.c, v, s_hi, w_hi, density.pdf(w_hi), True)
    return below + above


@dataclass(frozen=True)
class LossReport:
    divergence: float
    slippage: float
    load: float
    expected_load: float


def loss_report(curve, v, v_new, density):
    div = divergence_loss(curve, v, v_new)
    slip = slippage_loss(curve, v, v_new)
    return LossReport(div, slip, div * slip, expected_load(curve, v_new, density))
