"""Numerical second-order spatial jets and right time jets of a value function.

In one space dimension a jet at a point is summarized by an interval of
admissible first components and a threshold on the second component:

    super-jet ~ [p_lo, p_hi] x [P_super, inf)
    sub-jet   ~ [p_lo, p_hi] x (-inf, P_sub]

Slopes come from Richardson-extrapolated one-sided quotients over a
geometric radius schedule.  The ``o(h^2)`` remainder of the jet definition
is replaced by the envelope ``eps(h) = c h^2.5`` whose constant is fitted on
the finest radii.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .hjb import ValueGrid, eval_value

INSIDE, OUTSIDE, BOUNDARY = "inside", "outside", "boundary"


@dataclass(frozen=True)
class ClosedFormValue:
    func: Callable
    kind: str = "closed-form"
    dx: Optional[float] = None
    dt: Optional[float] = None

    def __call__(self, t, x):
        return self.func(t, x)


@dataclass(frozen=True)
class GridValue:
    grid: ValueGrid
    kind: str = "grid"

    @property
    def dx(self) -> float:
        return self.grid.dx

    @property
    def dt(self) -> float:
        return float(self.grid.t[1] - self.grid.t[0])

    def __call__(self, t, x):
        return eval_value(self.grid, t, x)


def as_value_source(V):
    if isinstance(V, (ClosedFormValue, GridValue)):
        return V
    if isinstance(V, ValueGrid):
        return GridValue(V)
    if callable(V):
        return ClosedFormValue(V)
    raise TypeError(f"cannot use {type(V).__name__} as a value function")


@dataclass(frozen=True)
class Schedule:
    h0: float
    K: int

    @property
    def radii(self) -> np.ndarray:
        return self.h0 * 2.0 ** -np.arange(self.K + 1)


def default_schedule(V, axis: str = "x") -> Schedule:
    step = V.dx if axis == "x" else V.dt
    if step is None:
        # finest radius ~4e-5: below it round-off in the second quotient dominates
        return Schedule(1e-2, 8)
    # finest radius two grid steps, four halvings above it
    return Schedule(32 * step, 4)


@dataclass(frozen=True)
class SpatialJetEstimate:
    p_interval_super: Optional[tuple]
    P_threshold_super: float
    p_interval_sub: Optional[tuple]
    P_threshold_sub: float
    sub_empty: bool
    super_empty: bool
    right_slope: float
    left_slope: float
    eps_constant: float
    radii_used: tuple
    flags: tuple = ()

    def to_dict(self) -> dict:
        return {
            "p_interval_super": self.p_interval_super,
            "P_threshold_super": self.P_threshold_super,
            "p_interval_sub": self.p_interval_sub,
            "P_threshold_sub": self.P_threshold_sub,
            "sub_empty": self.sub_empty,
            "super_empty": self.super_empty,
            "right_slope": self.right_slope,
            "left_slope": self.left_slope,
            "eps_constant": self.eps_constant,
            "radii": list(self.radii_used),
            "flags": list(self.flags),
        }


def _richardson(q):
    return 2.0 * q[-1] - q[-2]


def _fit_threshold(h, S, n_fit, sign):
    """Intercept of ``S ~ P + sign * c sqrt(h)`` on the finest radii, with ``c >= 0``."""
    hs, Ss = h[-n_fit:], S[-n_fit:]
    A = np.stack([np.ones_like(hs), sign * np.sqrt(hs)], axis=1)
    (P, c), *_ = np.linalg.lstsq(A, Ss, rcond=None)
    if c < 0:
        # no decaying envelope: keep the most restrictive finite-radius value
        return float(np.max(Ss) if sign > 0 else np.min(Ss)), 0.0
    return float(P), float(c)


def estimate_spatial_jets(V, t: float, x: float, schedule: Optional[Schedule] = None, kink_tol: Optional[float] = None, n_fit: int = 4) -> SpatialJetEstimate:
    V = as_value_source(V)
    schedule = schedule or default_schedule(V, "x")
    h = schedule.radii
    flags = []
    if V.dx is not None and h[-1] < 2 * V.dx * (1 - 1e-9):
        flags.append("radius-below-grid-resolution")
    if kink_tol is None:
        kink_tol = 1e-6 if V.dx is None else 5e-3
    n_fit = min(n_fit, h.size)

    v0 = float(V(t, x))
    vr = np.asarray(V(t, x + h), dtype=float)
    vl = np.asarray(V(t, x - h), dtype=float)
    r = _richardson((vr - v0) / h)
    l = _richardson((v0 - vl) / h)

    def second(p, reduce):
        # 2 (V(x +- h) - V(x) -+ p h) / h^2 on both sides
        sides = np.stack([2 * (vr - v0 - p * h) / h**2, 2 * (vl - v0 + p * h) / h**2])
        return reduce(sides, axis=0)

    if abs(r - l) <= kink_tol:
        p = 0.5 * (r + l)
        sup_iv = sub_iv = (p, p)
        S_sup = second(p, np.max)
        S_sub = second(p, np.min)
    elif l > r:
        # concave kink: only the super-jet survives
        sup_iv, sub_iv = (r, l), None
        S_sup = np.maximum(second(r, np.max), second(l, np.max))
        S_sub = None
    else:
        sup_iv, sub_iv = None, (l, r)
        S_sup = None
        S_sub = np.minimum(second(l, np.min), second(r, np.min))

    eps_c = 0.0
    P_sup = P_sub = float("nan")
    if S_sup is not None:
        P_sup, c = _fit_threshold(h, S_sup, n_fit, +1.0)
        eps_c = max(eps_c, c / 2)
    if S_sub is not None:
        P_sub, c = _fit_threshold(h, S_sub, n_fit, -1.0)
        eps_c = max(eps_c, c / 2)
    return SpatialJetEstimate(
        sup_iv, P_sup, sub_iv, P_sub, sub_iv is None, sup_iv is None, float(r), float(l), eps_c, tuple(h), tuple(flags)
    )


def test_membership(est: SpatialJetEstimate, p: float, P: float, tol: float, side: str = "super") -> str:
    """Classify ``(p, P)`` against the estimated super- or sub-jet.

    ``boundary`` means every violation is within ``tol`` and at least one
    constraint is active within ``tol``.
    """
    if side == "super":
        iv, d_P = est.p_interval_super, est.P_threshold_super - P
    elif side == "sub":
        iv, d_P = est.p_interval_sub, P - est.P_threshold_sub
    else:
        raise ValueError("side must be 'super' or 'sub'")
    if iv is None:
        return OUTSIDE
    lo, hi = iv
    d_p = max(lo - p, p - hi)
    if d_p > tol or d_P > tol:
        return OUTSIDE
    if max(d_p, d_P) >= -tol:
        return BOUNDARY
    return INSIDE


test_membership.__test__ = False


@dataclass(frozen=True)
class TimeJetEstimate:
    upper_dini: float
    lower_dini: float
    slope: float
    radii_used: tuple
    flags: tuple = ()

    def to_dict(self) -> dict:
        return {"upper_dini": self.upper_dini, "lower_dini": self.lower_dini, "slope": self.slope, "radii": list(self.radii_used), "flags": list(self.flags)}


def estimate_time_jets(V, t: float, x, schedule: Optional[Schedule] = None, n_fit: int = 4, T: Optional[float] = None) -> TimeJetEstimate:
    """Upper and lower right Dini derivatives of ``s -> V(s, x)`` at ``t``.

    A line in ``h`` is fitted to the finest forward quotients; its intercept
    is the slope and the largest fit residual widens it into the Dini pair.
    ``x`` may be an array of states, in which case arrays are returned.
    """
    V = as_value_source(V)
    schedule = schedule or default_schedule(V, "t")
    h = schedule.radii
    flags = []
    if T is not None and t + h[0] > T + 1e-12:
        raise ValueError("time-jet schedule runs past the horizon")
    x = np.asarray(x, dtype=float)
    v0 = np.asarray(V(t, x), dtype=float)
    D = np.stack([(np.asarray(V(t + hk, x), dtype=float) - v0) / hk for hk in h])
    n_fit = min(n_fit, h.size)
    hs = h[-n_fit:]
    A = np.stack([np.ones_like(hs), hs], axis=1)
    Ds = D[-n_fit:].reshape(n_fit, -1)
    coef, *_ = np.linalg.lstsq(A, Ds, rcond=None)
    resid = np.max(np.abs(Ds - A @ coef), axis=0)
    slope = coef[0].reshape(x.shape)
    spread = resid.reshape(x.shape)
    up, lo = slope + spread, slope - spread
    if x.ndim == 0:
        return TimeJetEstimate(float(up), float(lo), float(slope), tuple(h), tuple(flags))
    return TimeJetEstimate(up, lo, slope, tuple(h), tuple(flags))
