"""Monotone finite differences for the generalized HJB equation.

The solver works with ``y = -v``, for which the equation reads

    y_t + sup_u G(t, x, y, y_x, y_xx, u) = 0,     y(T, x) = phi(x),

and steps backward in time.  First differences are upwinded by the sign of
the effective drift ``b + sigma f_z`` (the driver sees ``z = sigma y_x``),
second differences are central, and the supremum runs over a uniform grid of
every interval of the control set.

Two time discretizations are available.  ``explicit`` evaluates the
Hamiltonian at the previous time level and refuses steps above its
stability bound.  ``implicit`` solves the backward Euler system by policy
iteration (Howard's algorithm) with the driver linearized in ``(y, z)``; it
is monotone for any step and is the default.
"""

from __future__ import annotations

import csv
import math
import time
import warnings
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np
from scipy.linalg import solve_banded

from .model import ControlProblem


class UnstableSchemeError(ValueError):
    def __init__(self, dt, bound):
        super().__init__(f"time step {dt:.3e} exceeds the explicit stability bound {bound:.3e}")
        self.dt = dt
        self.bound = bound


class SchemeBlowupError(FloatingPointError):
    pass


class ExtrapolationWarning(UserWarning):
    pass


@dataclass(frozen=True)
class GridSpec:
    x_lo: float = -3.0
    x_hi: float = 3.0
    dx: float = 0.005
    dt: float = 0.002
    boundary: str = "linear-extrapolation"
    control_grid_step: float = 0.01
    scheme: str = "implicit"
    max_policy_iterations: int = 50

    def __post_init__(self):
        if not self.x_lo < self.x_hi:
            raise ValueError("need x_lo < x_hi")
        if self.dx <= 0 or self.dt <= 0:
            raise ValueError("dx and dt must be positive")
        if self.boundary not in ("linear-extrapolation", "dirichlet-closed-form"):
            raise ValueError(f"unknown boundary policy {self.boundary!r}")
        if self.scheme not in ("implicit", "explicit"):
            raise ValueError(f"unknown scheme {self.scheme!r}")

    @property
    def x(self) -> np.ndarray:
        n = int(round((self.x_hi - self.x_lo) / self.dx))
        return np.linspace(self.x_lo, self.x_hi, n + 1)


@dataclass
class ValueGrid:
    t: np.ndarray  # (J+1,)
    x: np.ndarray  # (I+1,)
    v: np.ndarray  # (J+1, I+1)
    spec: GridSpec
    stability_bound: float
    controls: np.ndarray
    label: str = ""
    runtime: float = 0.0
    policy_iterations: int = 0

    @property
    def dx(self) -> float:
        return float(self.x[1] - self.x[0])

    def metadata(self) -> dict:
        return {
            "problem": self.label,
            "spec": asdict(self.spec),
            "stability_bound": self.stability_bound,
            "time_steps": len(self.t) - 1,
            "space_nodes": len(self.x),
            "controls": len(self.controls),
            "policy_iterations": self.policy_iterations,
            "runtime_seconds": self.runtime,
        }


# --------------------------------------------------------------------------
# finite differences


def _differences(y, dx):
    """Forward, backward and central second differences at interior nodes."""
    fwd = (y[2:] - y[1:-1]) / dx
    bwd = (y[1:-1] - y[:-2]) / dx
    d2 = (y[2:] - 2.0 * y[1:-1] + y[:-2]) / (dx * dx)
    return fwd, bwd, d2


def _hamiltonians(problem, t, x, y, dx, controls):
    """``G`` for every control (rows) at every interior node (columns), upwinded.

    Returns ``(G, beta, pieces)`` where ``pieces`` holds the quantities needed
    to linearize the chosen control's operator.
    """
    c = problem.coefficients
    xi = x[None, 1:-1]
    u = controls[:, None]
    fwd, bwd, d2 = _differences(y, dx)
    yi = y[None, 1:-1]
    s = c.sigma(t, xi, u)
    b = c.b(t, xi, u)
    central = 0.5 * (fwd + bwd)
    fz = c.f_z(t, xi, yi, s * central, u)
    beta = b + s * fz
    yx = np.where(beta >= 0, fwd, bwd)
    z = s * yx
    G = 0.5 * s * s * d2 + b * yx + c.f(t, xi, yi, z, u)
    return G, beta, (s, b, z, yx)


def stability_bound(problem: ControlProblem, spec: GridSpec, controls, y_probe=None) -> float:
    """``dx^2 / (max sigma^2 + dx max|beta| + dx^2 L_f)`` over the grid."""
    x = spec.x
    c = problem.coefficients
    u = controls[:, None]
    ts = np.linspace(problem.t0, problem.T, 5)
    s2, beta, lf = 0.0, 0.0, 0.0
    y = np.zeros_like(x) if y_probe is None else y_probe
    for t in ts:
        s = c.sigma(t, x[None, :], u)
        s2 = max(s2, float(np.max(s * s)))
        fz = c.f_z(t, x[None, :], y[None, :], 0.0 * s, u)
        beta = max(beta, float(np.max(np.abs(c.b(t, x[None, :], u) + s * fz))))
        lf = max(lf, float(np.max(np.abs(c.f_y(t, x[None, :], y[None, :], 0.0 * s, u)))))
    dx = spec.dx
    return dx * dx / (s2 + dx * beta + dx * dx * lf)


def _argmax_smallest(G, rel_tol=1e-10):
    """Row index of the maximum per column; near-ties go to the smallest control."""
    top = G.max(axis=0)
    return np.argmax(G >= top - rel_tol * (1.0 + np.abs(top)), axis=0)


# --------------------------------------------------------------------------
# solver


def solve_hjb(
    problem: ControlProblem,
    spec: GridSpec = GridSpec(),
    terminal: Optional[Callable] = None,
    closed_form: Optional[Callable] = None,
) -> ValueGrid:
    """Solve for the value function ``v`` on ``[t0, T] x [x_lo, x_hi]``.

    ``terminal`` overrides the terminal data ``v(T, x) = -phi(x)``;
    ``closed_form(t, x)`` supplies boundary values for the Dirichlet policy.
    """
    if problem.n != 1:
        raise ValueError("the HJB solver handles scalar states only")
    if spec.boundary == "dirichlet-closed-form" and closed_form is None:
        raise ValueError("Dirichlet boundary needs a closed-form value function")
    start = time.perf_counter()
    x = spec.x
    dx = float(x[1] - x[0])
    J = max(1, int(math.ceil((problem.T - problem.t0) / spec.dt - 1e-9)))
    dt = (problem.T - problem.t0) / J
    t = problem.t0 + dt * np.arange(J + 1)
    controls = problem.controls.grid(spec.control_grid_step)
    bound = stability_bound(problem, spec, controls)
    if spec.scheme == "explicit" and dt > bound * (1 + 1e-12):
        raise UnstableSchemeError(dt, bound)

    v_T = -problem.phi(x) if terminal is None else np.asarray(terminal(x), dtype=float)
    y = -np.asarray(v_T, dtype=float) + np.zeros_like(x)
    Y = np.empty((J + 1, x.size))
    Y[J] = y
    iterations = 0
    for j in range(J - 1, -1, -1):
        if spec.scheme == "explicit":
            G, _, _ = _hamiltonians(problem, t[j + 1], x, y, dx, controls)
            new = y.copy()
            new[1:-1] = y[1:-1] + dt * G.max(axis=0)
        else:
            edges = None
            if spec.boundary == "dirichlet-closed-form":
                edges = (-closed_form(t[j], x[0]), -closed_form(t[j], x[-1]))
            new, its = _implicit_step(problem, t[j], x, y, dx, dt, controls, spec.max_policy_iterations, edges)
            iterations += its
        _apply_boundary(new, spec, closed_form, t[j], x)
        if not np.all(np.isfinite(new)):
            bad = int(np.flatnonzero(~np.isfinite(new))[0])
            raise SchemeBlowupError(f"non-finite value at t={t[j]:.6g}, x={x[bad]:.6g}")
        y = new
        Y[j] = y
    return ValueGrid(t, x, -Y, spec, bound, controls, problem.label, time.perf_counter() - start, iterations)


def _apply_boundary(y, spec, closed_form, t, x):
    if spec.boundary == "dirichlet-closed-form":
        y[0] = -closed_form(t, x[0])
        y[-1] = -closed_form(t, x[-1])
    else:
        y[0] = 2.0 * y[1] - y[2]
        y[-1] = 2.0 * y[-2] - y[-3]


def _implicit_step(problem, t, x, y_next, dx, dt, controls, max_iter, edges=None):
    """One backward Euler step ``y - dt sup_u G(y) = y_next`` by policy iteration."""
    c = problem.coefficients
    n = x.size
    xi = x[1:-1]
    y = y_next.copy()
    policy = None
    for it in range(1, max_iter + 1):
        G, beta, (s, b, z, yx) = _hamiltonians(problem, t, x, y, dx, controls)
        k = _argmax_smallest(G)
        cols = np.arange(xi.size)
        u = controls[k]
        s_k, z_k, beta_k = s[k, cols], z[k, cols], beta[k, cols]
        yi = y[1:-1]
        fy = c.f_y(t, xi, yi, z_k, u)
        fz = c.f_z(t, xi, yi, z_k, u)
        c0 = c.f(t, xi, yi, z_k, u) - fy * yi - fz * z_k
        diff = 0.5 * s_k * s_k / (dx * dx)
        up = diff + np.maximum(beta_k, 0.0) / dx
        lo = diff + np.maximum(-beta_k, 0.0) / dx
        # banded storage for (2, 2) bands: rows are offsets +2, +1, 0, -1, -2
        ab = np.zeros((5, n))
        ab[2, 1:-1] = 1.0 + dt * (up + lo - fy)
        ab[1, 2:] = -dt * up
        ab[3, :-2] = -dt * lo
        rhs = np.zeros(n)
        rhs[1:-1] = y_next[1:-1] + dt * c0
        if edges is None:
            # y0 - 2 y1 + y2 = 0 and the mirror image
            ab[2, 0], ab[1, 1], ab[0, 2] = 1.0, -2.0, 1.0
            ab[2, -1], ab[3, -2], ab[4, -3] = 1.0, -2.0, 1.0
        else:
            ab[2, 0], ab[2, -1] = 1.0, 1.0
            rhs[0], rhs[-1] = edges
        new = solve_banded((2, 2), ab, rhs)
        change = np.max(np.abs(new - y))
        done = (policy is not None and np.array_equal(k, policy)) or change <= 1e-9 * (1 + np.max(np.abs(new)))
        y, policy = new, k
        if done:
            return y, it
    warnings.warn(f"policy iteration did not settle at t={t:.4g} within {max_iter} iterations", RuntimeWarning)
    return y, max_iter


# --------------------------------------------------------------------------
# queries


def _locate(axis, q):
    i = np.clip(np.searchsorted(axis, q, side="right") - 1, 0, axis.size - 2)
    w = (q - axis[i]) / (axis[i + 1] - axis[i])
    return i, w


def eval_value(grid: ValueGrid, t, x):
    """Bilinear interpolation; outside the grid the edge cells are extended linearly."""
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    outside = (t < grid.t[0] - 1e-12) | (t > grid.t[-1] + 1e-12) | (x < grid.x[0] - 1e-12) | (x > grid.x[-1] + 1e-12)
    if np.any(outside):
        warnings.warn("value query outside the grid; extrapolating", ExtrapolationWarning, stacklevel=2)
    j, a = _locate(grid.t, t)
    i, w = _locate(grid.x, x)
    v = grid.v
    lower = (1 - w) * v[j, i] + w * v[j, i + 1]
    upper = (1 - w) * v[j + 1, i] + w * v[j + 1, i + 1]
    out = (1 - a) * lower + a * upper
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class DerivativeEstimate:
    v: float
    v_x_left: float
    v_x_right: float
    v_xx: float
    stencil: float
    widened: bool = False


def estimate_derivatives(grid: ValueGrid, t: float, x: float, width: int = 1) -> DerivativeEstimate:
    """One-sided first differences and a central second difference at ``(t, x)``."""
    h = width * grid.dx
    widened = False
    room = min(x - grid.x[0], grid.x[-1] - x)
    if room < h:
        warnings.warn("derivative stencil reaches the boundary; narrowing it", ExtrapolationWarning, stacklevel=2)
        h = max(room, 1e-3 * grid.dx)
        widened = True
    v0 = eval_value(grid, t, x)
    vl = eval_value(grid, t, x - h)
    vr = eval_value(grid, t, x + h)
    return DerivativeEstimate(v0, (v0 - vl) / h, (vr - v0) / h, (vr - 2 * v0 + vl) / (h * h), h, widened)


@dataclass(frozen=True)
class RegularityReport:
    lipschitz_const: float
    growth_const: float
    lipschitz_by_time: np.ndarray

    def __iter__(self):
        return iter((self.lipschitz_const, self.growth_const))


def regularity_report(grid: ValueGrid) -> RegularityReport:
    slopes = np.abs(np.diff(grid.v, axis=1)) / np.diff(grid.x)[None, :]
    by_time = slopes.max(axis=1)
    growth = np.max(np.abs(grid.v) / (1.0 + np.abs(grid.x))[None, :])
    return RegularityReport(float(by_time.max()), float(growth), by_time)


def argmax_G(problem: ControlProblem, grid: ValueGrid, t: float, x: float, tol: float = 1e-9) -> np.ndarray:
    """Controls on the grid whose ``G(t, x, -v, -v_x, -v_xx, u)`` is within ``tol`` of the max.

    ``v_x`` is the one-sided estimate picked by the sign of each control's
    effective drift, as in the scheme.
    """
    d = estimate_derivatives(grid, t, x)
    controls = grid.controls
    c = problem.coefficients
    r = -d.v
    s = c.sigma(t, x, controls)
    central = -0.5 * (d.v_x_left + d.v_x_right)
    beta = c.b(t, x, controls) + s * c.f_z(t, x, r, s * central, controls)
    p = np.where(beta >= 0, -d.v_x_right, -d.v_x_left)
    G = 0.5 * (-d.v_xx) * s * s + p * c.b(t, x, controls) + c.f(t, x, r, s * p, controls)
    return controls[G >= G.max() - tol]


# --------------------------------------------------------------------------
# export


def write_value_csv(grid: ValueGrid, path, time_stride: int = 1) -> None:
    """Columns ``t, x, v``; only every ``time_stride``-th time level (and the last) is written."""
    rows = sorted(set(range(0, len(grid.t), max(1, int(time_stride)))) | {len(grid.t) - 1})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "x", "v"])
        for j in rows:
            tj = grid.t[j]
            for i, xi in enumerate(grid.x):
                w.writerow(["%.17g" % tj, "%.17g" % xi, "%.17g" % grid.v[j, i]])
