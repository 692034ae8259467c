"""Least-squares Monte Carlo solvers for the cost BSDE and the adjoint equations.

All backward equations share one step: with ``T_{i+1}`` the target carried
back from node ``i+1``

    m0 = E[T_{i+1} | X_i]
    Z_i = argmin E|T_{i+1} - m0 - Z(X_i) dW_i|^2
    m  = E[T_{i+1} - Z_i dW_i | X_i]
    Y_i = m + g(t_i, X_i, m, Z_i) dt

``Z_i`` is the same conditional quantity as ``E[T_{i+1} dW_i | X_i] / dt``
but fitted against ``dW_i`` directly, which avoids the ``dW^2`` noise of the
covariation form.  Subtracting ``m0`` and ``Z_i dW_i`` are control variates;
they leave the conditional expectations unchanged but remove most of the
martingale noise from the regressions.  Conditional expectations are least-squares fits on a
polynomial basis in the state, optionally localized by sign or by quantile
bins.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np
from scipy.interpolate import BSpline
from scipy.linalg import cho_factor, cho_solve

from .model import ControlProblem
from .sim import PathBundle, TimeGrid, make_noise, simulate_forward, policy_from_spec


class BasisDegradationWarning(UserWarning):
    pass


class InvariantViolation(RuntimeError):
    pass


@dataclass(frozen=True)
class RegressionBasis:
    """Regression basis in the standardized state.

    The default is a polynomial of the given degree.  ``kind="spline"``
    switches to a cubic B-spline with ``knots`` intervals spread between
    extreme state quantiles (uniformly or at quantiles, per
    ``knot_placement``); the outer intervals are stretched to cover every
    sample.  The fit stays continuous, which keeps the ``dW``-covariation
    estimate of ``Z`` free of jumps at cell edges.  ``localize_sign`` fits separate polynomials on ``x < 0``, ``x == 0`` and
    ``x > 0``; ``bins > 1`` fits separate polynomials on equal-count
    quantile bins.  ``weighted`` uses weights ``1/(1+x^2)``, which suits
    targets whose noise grows linearly with ``|x|``.
    """

    degree: int = 4
    localize_sign: bool = False
    bins: int = 1
    weighted: bool = False
    kind: str = "polynomial"
    knots: int = 12
    knot_placement: str = "quantile"
    min_per_coef: int = 10

    def __post_init__(self):
        if self.degree < 1:
            raise ValueError("basis degree must be >= 1")
        if self.bins < 1:
            raise ValueError("bins must be >= 1")
        if self.knot_placement not in ("quantile", "uniform"):
            raise ValueError(f"unknown knot placement {self.knot_placement!r}")
        if self.kind not in ("polynomial", "spline"):
            raise ValueError(f"unknown basis kind {self.kind!r}")


def basis_for(example_basis: dict) -> RegressionBasis:
    return RegressionBasis(**dict(example_basis))


@dataclass
class _Cell:
    idx: np.ndarray
    A: Optional[np.ndarray]  # design matrix, None for a constant cell
    sw: Optional[np.ndarray] = None  # square-root weights
    gram: Optional[tuple] = None  # Cholesky factor of (sw A)^T (sw A)


def _cholesky(G):
    """Cholesky factor of a Gram matrix, or ``None`` when it is numerically singular."""
    d = np.diag(G)
    if not d.min() > 0:
        return None
    scale = 1.0 / np.sqrt(d)
    Gs = G * scale[:, None] * scale[None, :]
    if np.linalg.eigvalsh(Gs)[0] < 1e-12:
        return None
    return cho_factor(Gs), scale


def _lsq(factor, B, y):
    (cf, scale) = factor
    return scale * cho_solve(cf, scale * (B.T @ y))


class _Projector:
    """Least-squares projections onto the basis at one time step.

    Fits solve the normal equations of the (weighted) design through a
    Cholesky factor of its small Gram matrix.
    """

    def __init__(self, x: np.ndarray, basis: RegressionBasis):
        self.n = x.shape[0]
        self.cells = []
        for mask in self._cells(x, basis):
            idx = np.flatnonzero(mask)
            if idx.size:
                self.cells.append(self._factor(idx, x[idx], basis))

    @staticmethod
    def _cells(x, basis):
        groups = [np.ones(x.shape, dtype=bool)]
        if basis.localize_sign:
            groups = [x < 0, x == 0, x > 0]
        if basis.bins > 1:
            out = []
            for g in groups:
                xs = x[g]
                if xs.size == 0:
                    continue
                edges = np.quantile(xs, np.linspace(0, 1, basis.bins + 1)[1:-1])
                which = np.searchsorted(edges, x, side="right")
                out.extend(g & (which == k) for k in range(basis.bins))
            groups = out
        return groups

    @staticmethod
    def _designs(xc, basis):
        """Candidate design matrices, richest first."""
        if basis.kind == "spline" and xc.size >= basis.min_per_coef * (basis.knots + 3):
            if basis.knot_placement == "uniform":
                lo, hi = np.quantile(xc, [0.002, 0.998])
                inner = np.linspace(lo, hi, basis.knots + 1) if hi > lo else np.array([lo])
                # stretch the outer intervals over the extreme states instead of clipping them
                inner[0], inner[-1] = min(inner[0], xc.min()), max(inner[-1], xc.max())
            else:
                inner = np.unique(np.quantile(xc, np.linspace(0, 1, basis.knots + 1)))
            if inner.size >= 2:
                knots = np.concatenate([np.repeat(inner[0], 3), inner, np.repeat(inner[-1], 3)])
                yield BSpline.design_matrix(np.clip(xc, inner[0], inner[-1]), knots, 3).toarray()
        s = (xc - xc.mean()) / xc.std()
        deg = min(basis.degree, max(0, xc.size // basis.min_per_coef - 1))
        for d in range(deg, 0, -1):
            yield np.vander(s, d + 1, increasing=True)

    @staticmethod
    def _factor(idx, xc, basis):
        if not xc.std() > 1e-12 * max(1.0, abs(xc.mean())):
            return _Cell(idx, None)
        sw = 1.0 / np.sqrt(1.0 + xc * xc) if basis.weighted else np.ones_like(xc)
        first = True
        for A in _Projector._designs(xc, basis):
            Aw = A * sw[:, None]
            factor = _cholesky(Aw.T @ Aw)
            if factor is not None:
                return _Cell(idx, A, sw, factor)
            if first:
                warnings.warn("regression design rank deficient; lowering the basis", BasisDegradationWarning, stacklevel=4)
                first = False
        return _Cell(idx, None)

    def __call__(self, target: np.ndarray) -> np.ndarray:
        """Conditional expectation of ``target`` given the state."""
        out = np.empty(target.shape)
        for c in self.cells:
            y = target[c.idx]
            if c.A is None:
                out[c.idx] = y.mean()
            else:
                out[c.idx] = c.A @ _lsq(c.gram, c.A, c.sw * c.sw * y)
        return out

    def slope(self, target: np.ndarray, dW: np.ndarray) -> np.ndarray:
        """Least-squares ``Z(x)`` in ``target ~ Z(x) dW`` over the basis."""
        out = np.empty(target.shape)
        for c in self.cells:
            y, w = target[c.idx], dW[c.idx]
            if c.A is None:
                out[c.idx] = np.dot(y, w) / np.dot(w, w)
                continue
            B = c.A * (c.sw * w)[:, None]
            factor = _cholesky(B.T @ B)
            if factor is None:
                out[c.idx] = np.dot(y, w) / np.dot(w, w)
                continue
            out[c.idx] = c.A @ _lsq(factor, B, c.sw * y)
        return out


class _MeanProjector:
    """Degenerate cross-section: plain sample means."""

    def __call__(self, target):
        return np.full(target.shape, target.mean())

    def slope(self, target, dW):
        return np.full(target.shape, np.dot(target, dW) / np.dot(dW, dW))


def _backward_step(proj, target, dW, dt):
    m0 = proj(target)
    z = proj.slope(target - m0, dW)
    m = proj(target - z * dW)
    resid = target - m - z * dW
    return m, z, float(np.sqrt(np.mean(resid**2)))


def _projector(x, basis, i):
    if i == 0 and np.ptp(x) == 0:
        return _MeanProjector()
    return _Projector(x, basis)


def _linear_backward(paths: PathBundle, basis: RegressionBasis, terminal, driver):
    """Generic backward induction for a scalar BSDE with driver ``driver(i, ok, y, z)``."""
    grid = paths.grid
    M, N, dt = paths.M, grid.N, grid.dt
    ok = paths.ok
    Y = np.full((M, N + 1), np.nan)
    Z = np.full((M, N), np.nan)
    Y[ok, N] = terminal
    residual = 0.0
    for i in range(N - 1, -1, -1):
        proj = _projector(paths.X[ok, i], basis, i)
        m, z, r = _backward_step(proj, Y[ok, i + 1], paths.dW[ok, i], dt)
        Y[ok, i] = m + driver(i, ok, m, z) * dt
        Z[ok, i] = z
        residual = max(residual, r)
    return Y, Z, residual


# --------------------------------------------------------------------------
# cost BSDE


@dataclass(frozen=True)
class BsdeSolution:
    Y: np.ndarray  # (M, N+1)
    Z: np.ndarray  # (M, N)
    paths: PathBundle
    residual_scale: float

    @property
    def Y0(self) -> float:
        return float(np.nanmean(self.Y[:, 0]))


def solve_bsde(problem: ControlProblem, paths: PathBundle, basis: RegressionBasis = RegressionBasis(), picard: bool = False) -> BsdeSolution:
    t = paths.grid.nodes
    u = paths.u
    X = paths.X
    dt = paths.grid.dt
    terminal = problem.phi(X[paths.ok, -1])

    def driver(i, ok, y, z):
        g = problem.f(t[i], X[ok, i], y, z, u[ok, i])
        if picard:
            g = problem.f(t[i], X[ok, i], y + g * dt, z, u[ok, i])
        return g

    Y, Z, res = _linear_backward(paths, basis, terminal, driver)
    return BsdeSolution(Y, Z, paths, res)


@dataclass(frozen=True)
class MonteCarloSpec:
    M: int = 20000
    N: int = 200
    seed: int = 0
    basis: RegressionBasis = RegressionBasis()
    batches: int = 8
    workers: int = 1


def cost_functional(problem: ControlProblem, t: float, x: float, policy, mc: MonteCarloSpec = MonteCarloSpec()):
    """Return ``(J, stderr)`` with ``J = -Y(t)``.

    The standard error comes from independent batch solves, which also
    captures the regression error that a per-path spread would miss.
    """
    grid = TimeGrid(t, problem.T, mc.N)
    noise = make_noise(grid, mc.M, mc.seed, mc.workers)
    paths = simulate_forward(problem, policy_from_spec(policy), grid, noise, x, mc.workers)
    J = -solve_bsde(problem, paths, mc.basis).Y0
    if mc.batches < 2:
        return J, float("nan")
    per = []
    for rows in np.array_split(np.arange(mc.M), mc.batches):
        sub = _subset(paths, rows)
        per.append(-solve_bsde(problem, sub, mc.basis).Y0)
    return J, float(np.std(per, ddof=1) / math.sqrt(len(per)))


def _subset(paths: PathBundle, rows) -> PathBundle:
    from .sim import NoiseBundle

    noise = NoiseBundle(paths.grid, paths.dW[rows], paths.noise.seed, paths.noise.substreams[rows])
    return PathBundle(paths.grid, noise, paths.x0, paths.X[rows], paths.u[rows], paths.failed[rows], 0, paths.policy_name)


def moment_bound_ratio(problem: ControlProblem, cost: BsdeSolution) -> float:
    """``sup_i E[Y_i^2] / (E[phi(X_T)^2] + E int |f(s, X, 0, 0, u)|^2 ds)``."""
    paths = cost.paths
    ok = paths.ok
    t = paths.grid.nodes
    X, u = paths.X[ok], paths.u[ok]
    lhs = np.max(np.mean(cost.Y[ok] ** 2, axis=0))
    f0 = problem.f(t[:-1], X[:, :-1], 0.0, 0.0, u[:, :-1])
    rhs = np.mean(problem.phi(X[:, -1]) ** 2) + np.mean(np.sum(f0**2, axis=1) * paths.grid.dt)
    return float(lhs / rhs) if rhs > 0 else float("inf") if lhs > 0 else 0.0


# --------------------------------------------------------------------------
# coefficients along a trajectory


class _Node:
    """Coefficient derivatives at one time node for a subset of paths, computed on access."""

    def __init__(self, c, t, X, Y, Z, u):
        self._c, self._args = c, (t, X, Y, Z, u)

    def _state(self, name):
        t, X, _, _, u = self._args
        with np.errstate(invalid="ignore"):
            return getattr(self._c, name)(t, X, u)

    def _driver(self, name):
        with np.errstate(invalid="ignore"):
            return getattr(self._c, name)(*self._args)

    b_x = cached_property(lambda self: self._state("b_x"))
    b_xx = cached_property(lambda self: self._state("b_xx"))
    sigma = cached_property(lambda self: self._state("sigma"))
    sigma_x = cached_property(lambda self: self._state("sigma_x"))
    sigma_xx = cached_property(lambda self: self._state("sigma_xx"))
    f_x = cached_property(lambda self: self._driver("f_x"))
    f_y = cached_property(lambda self: self._driver("f_y"))
    f_z = cached_property(lambda self: self._driver("f_z"))
    D2f = cached_property(lambda self: self._driver("D2f"))


class Trajectory:
    """Coefficient derivatives evaluated at ``(t_i, X_i, Y_i, Z_i, u_i)``.

    :meth:`at` gives the derivatives at one node; backward sweeps use it so
    that no ``(M, N+1)`` coefficient array is ever materialized.  Full
    arrays are still available as attributes (``tr.f_z`` and so on) and
    are computed on first access.  ``Z`` at the terminal node repeats the
    last available value (only terminal data is read there).
    """

    FIELDS = ("b_x", "b_xx", "sigma", "sigma_x", "sigma_xx", "f_x", "f_y", "f_z", "D2f")

    def __init__(self, problem: ControlProblem, cost: BsdeSolution):
        paths = cost.paths
        self._c = problem.coefficients
        self._t = paths.grid.nodes
        self._X, self._u, self._Y, self._Z = paths.X, paths.u, cost.Y, cost.Z
        self._full = {}

    def at(self, i: int, rows=slice(None)) -> _Node:
        col = lambda a: np.ascontiguousarray(a[rows, min(i, a.shape[1] - 1)])
        return _Node(self._c, self._t[i], col(self._X), col(self._Y), col(self._Z), col(self._u))

    def __getattr__(self, name):
        if name not in Trajectory.FIELDS:
            raise AttributeError(name)
        if name not in self._full:
            Z = np.concatenate([self._Z, self._Z[:, -1:]], axis=1)
            node = _Node(self._c, self._t[None, :], self._X, self._Y, Z, self._u)
            self._full[name] = getattr(node, name)
        return self._full[name]


def along(problem: ControlProblem, cost: BsdeSolution) -> Trajectory:
    return Trajectory(problem, cost)


# --------------------------------------------------------------------------
# first- and second-order adjoint equations


@dataclass(frozen=True)
class FirstOrderAdjoint:
    p: np.ndarray  # (M, N+1)
    q: np.ndarray  # (M, N)
    residual_scale: float


@dataclass(frozen=True)
class SecondOrderAdjoint:
    P: np.ndarray  # (M, N+1)
    Q: np.ndarray  # (M, N)
    residual_scale: float


def solve_first_order_adjoint(problem: ControlProblem, paths: PathBundle, cost: BsdeSolution, basis: RegressionBasis = RegressionBasis()) -> FirstOrderAdjoint:
    """Linear BSDE with driver ``f_y p + (f_z sigma_x + b_x) p + f_z q + sigma_x q + f_x``."""
    tr = along(problem, cost)
    terminal = problem.coefficients.phi_x(paths.X[paths.ok, -1])

    def driver(i, ok, p, q):
        n = tr.at(i, ok)
        a = n.f_y + n.f_z * n.sigma_x + n.b_x
        c = n.f_z + n.sigma_x
        return a * p + c * q + n.f_x

    p, q, res = _linear_backward(paths, basis, terminal, driver)
    return FirstOrderAdjoint(p, q, res)


def second_order_driver_terms(tr: Trajectory, p, q, i, ok):
    """Coefficients ``(a, c, source)`` of the second-order driver ``a P + c Q + source`` at node ``i``."""
    n = tr.at(i, ok)
    fy, fz, sx, bx = n.f_y, n.f_z, n.sigma_x, n.b_x
    a = fy + 2.0 * (fz * sx + bx) + sx * sx
    c = fz + 2.0 * sx
    pi, qi = p[ok, i], q[ok, i]
    v = np.stack([np.ones_like(pi), pi, sx * pi + qi])
    quad = np.einsum("im,ijm,jm->m", v, n.D2f + np.zeros((3, 3, pi.size)), v)
    source = n.b_xx * pi + n.sigma_xx * (fz * pi + qi) + quad
    return a, c, source


def solve_second_order_adjoint(
    problem: ControlProblem,
    paths: PathBundle,
    cost: BsdeSolution,
    first: FirstOrderAdjoint,
    basis: RegressionBasis = RegressionBasis(),
) -> SecondOrderAdjoint:
    """Linear BSDE for ``(P, Q)`` with every driver term written out.

    The quadratic form uses ``v = [1, p, sigma_x p + q]`` against the full
    Hessian of ``f`` in ``(x, y, z)``.
    """
    tr = along(problem, cost)
    terminal = problem.coefficients.phi_xx(paths.X[paths.ok, -1])

    def driver(i, ok, P, Q):
        a, c, source = second_order_driver_terms(tr, first.p, first.q, i, ok)
        return a * P + c * Q + source

    P, Q, res = _linear_backward(paths, basis, terminal, driver)
    return SecondOrderAdjoint(P, Q, res)


# --------------------------------------------------------------------------
# adjoint FBSDE in exponential form


@dataclass(frozen=True)
class FbsdeAdjoint:
    pstar: np.ndarray  # (M, N+1)
    qstar: np.ndarray  # (M, N+1)
    kstar: np.ndarray  # (M, N)
    residual_scale: float


def exponential_weight(tr: Trajectory, paths: PathBundle) -> np.ndarray:
    """``q*(s) = exp{int f_y - 1/2 int f_z^2 + int f_z dW}`` with left-point sums."""
    dt = paths.grid.dt
    logq = np.zeros((paths.M, paths.grid.N + 1))
    for i in range(paths.grid.N):
        n = tr.at(i)
        fy, fz = n.f_y + np.zeros(paths.M), n.f_z + np.zeros(paths.M)
        logq[:, i + 1] = logq[:, i] + (fy * dt - 0.5 * fz * fz * dt + fz * paths.dW[:, i])
    return np.exp(logq, out=logq)


def solve_fbsde_adjoint(problem: ControlProblem, paths: PathBundle, cost: BsdeSolution, basis: RegressionBasis = RegressionBasis()) -> FbsdeAdjoint:
    """Solve ``-dp* = [b_x p* - f_x q* + sigma_x k*] ds - k* dW`` with ``p*(T) = -phi_x q*(T)``.

    The regression runs on ``pi = p*/q*`` and ``kappa = k*/q*``, which are
    functions of the current state, carrying the one-step ratio
    ``q*_{i+1}/q*_i`` into the target.
    """
    tr = along(problem, cost)
    qstar = exponential_weight(tr, paths)
    grid = paths.grid
    M, N, dt = paths.M, grid.N, grid.dt
    ok = paths.ok
    pi = np.full((M, N + 1), np.nan)
    kappa = np.full((M, N), np.nan)
    pi[ok, N] = -problem.coefficients.phi_x(paths.X[ok, N])
    residual = 0.0
    for i in range(N - 1, -1, -1):
        proj = _projector(paths.X[ok, i], basis, i)
        target = pi[ok, i + 1] * (qstar[ok, i + 1] / qstar[ok, i])
        m, k, r = _backward_step(proj, target, paths.dW[ok, i], dt)
        n = tr.at(i, ok)
        pi[ok, i] = m + (n.b_x * m - n.f_x + n.sigma_x * k) * dt
        kappa[ok, i] = k
        residual = max(residual, r)
    pi *= qstar
    kappa *= qstar[:, :-1]
    return FbsdeAdjoint(pi, qstar, kappa, residual)


def transform_adjoint(fbsde: FbsdeAdjoint, f_z: np.ndarray):
    """Map the FBSDE adjoint to ``(p, q)``: ``p = -p*/q*``, ``q = -(k* - p* f_z)/q*``.

    ``f_z`` is the driver's z-derivative along the trajectory, shape
    ``(M, N)`` or ``(M, N+1)``.
    """
    qs = fbsde.qstar
    if np.any(~(qs[np.isfinite(qs)] > 0)):
        raise InvariantViolation("q* must stay positive along every path")
    p = -fbsde.pstar / qs
    N = fbsde.kstar.shape[1]
    q = -(fbsde.kstar - fbsde.pstar[:, :N] * f_z[:, :N]) / qs[:, :N]
    return p, q


# --------------------------------------------------------------------------
# export


@dataclass(frozen=True)
class AdjointBundle:
    cost: BsdeSolution
    first: FirstOrderAdjoint
    second: SecondOrderAdjoint
    fbsde: Optional[FbsdeAdjoint] = None


def solve_all(problem: ControlProblem, paths: PathBundle, basis: RegressionBasis, fbsde: bool = True) -> AdjointBundle:
    cost = solve_bsde(problem, paths, basis)
    first = solve_first_order_adjoint(problem, paths, cost, basis)
    second = solve_second_order_adjoint(problem, paths, cost, first, basis)
    fb = solve_fbsde_adjoint(problem, paths, cost, basis) if fbsde else None
    return AdjointBundle(cost, first, second, fb)


def _fmt(a, m, i):
    return "" if i >= a.shape[1] else "%.17g" % a[m, i]


def write_cost_csv(cost: BsdeSolution, path, paths=None) -> None:
    grid = cost.paths.grid
    t = grid.nodes
    rows = range(cost.Y.shape[0]) if paths is None else paths
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "step", "t", "Y", "Z"])
        for m in rows:
            for i in range(grid.N + 1):
                w.writerow([m, i, "%.17g" % t[i], _fmt(cost.Y, m, i), _fmt(cost.Z, m, i)])


def write_adjoint_csv(bundle: AdjointBundle, path, paths=None) -> None:
    grid = bundle.cost.paths.grid
    t = grid.nodes
    rows = range(bundle.cost.Y.shape[0]) if paths is None else paths
    fb = bundle.fbsde
    cols = [bundle.first.p, bundle.first.q, bundle.second.P, bundle.second.Q]
    if fb is not None:
        cols += [fb.pstar, fb.qstar, fb.kstar]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "step", "t", "p", "q", "P", "Q", "pstar", "qstar", "kstar"])
        for m in rows:
            for i in range(grid.N + 1):
                vals = [_fmt(a, m, i) for a in cols] + [""] * (7 - len(cols))
                w.writerow([m, i, "%.17g" % t[i]] + vals)
