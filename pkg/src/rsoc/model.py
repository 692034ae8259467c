"""Recursive stochastic control problems and their Hamiltonian-type functions.

A problem couples the controlled state equation

    dX = b(s, X, u) ds + sigma(s, X, u) dW,        X(t) = x

with the cost BSDE

    -dY = f(s, X, Y, Z, u) ds - Z dW,               Y(T) = phi(X(T))

and the cost ``J = -Y(t)``.  All coefficient evaluators are numpy-vectorised
and broadcast over their arguments.  Only scalar states and controls are
supported by the solvers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import expr as _expr
from .expr import sech2

MEMBERSHIP_ATOL = 1e-12


class ControlDomainError(ValueError):
    pass


# --------------------------------------------------------------------------
# control sets


@dataclass(frozen=True)
class IntervalUnion:
    """Finite union of closed, disjoint, increasing intervals."""

    intervals: tuple

    def __post_init__(self):
        ivs = tuple((float(lo), float(hi)) for lo, hi in self.intervals)
        if not ivs:
            raise ValueError("control set must be nonempty")
        for lo, hi in ivs:
            if lo > hi:
                raise ValueError(f"interval ({lo}, {hi}) has lo > hi")
        for (_, hi), (lo, _) in zip(ivs, ivs[1:]):
            if not hi < lo:
                raise ValueError("intervals must be disjoint and strictly increasing")
        object.__setattr__(self, "intervals", ivs)

    def contains(self, u, atol: float = MEMBERSHIP_ATOL):
        u = np.asarray(u, dtype=float)
        inside = np.zeros(u.shape, dtype=bool)
        for lo, hi in self.intervals:
            inside |= (u >= lo - atol) & (u <= hi + atol)
        return inside

    def require(self, u) -> None:
        ok = self.contains(u)
        if not np.all(ok):
            bad = np.asarray(u, dtype=float)[~ok] if np.ndim(u) else np.asarray(u)
            raise ControlDomainError(f"control value(s) {np.ravel(bad)[:5]} outside {self}")

    def grid(self, step: float) -> np.ndarray:
        """Uniform grid on each interval, both endpoints included."""
        if step <= 0:
            raise ValueError("control grid step must be positive")
        pts = []
        for lo, hi in self.intervals:
            n = max(1, int(math.ceil((hi - lo) / step - 1e-9)))
            pts.append(np.linspace(lo, hi, n + 1) if hi > lo else np.array([lo]))
        return np.unique(np.concatenate(pts))

    def project(self, u):
        u = np.asarray(u, dtype=float)
        best = None
        best_d = None
        for lo, hi in self.intervals:
            c = np.clip(u, lo, hi)
            d = np.abs(c - u)
            if best is None:
                best, best_d = c, d
            else:
                take = d < best_d
                best = np.where(take, c, best)
                best_d = np.where(take, d, best_d)
        return best

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        lengths = np.array([hi - lo for lo, hi in self.intervals])
        weights = lengths / lengths.sum() if lengths.sum() > 0 else np.full(len(lengths), 1 / len(lengths))
        which = rng.choice(len(self.intervals), size=n, p=weights)
        lo = np.array([iv[0] for iv in self.intervals])[which]
        hi = np.array([iv[1] for iv in self.intervals])[which]
        return lo + (hi - lo) * rng.random(n)

    def __str__(self):
        return "∪".join(f"[{lo:g},{hi:g}]" for lo, hi in self.intervals)


# --------------------------------------------------------------------------
# coefficients


def _zeros(*args):
    return np.zeros(np.broadcast(*[np.asarray(a, dtype=float) for a in args]).shape)


def _full(value, *args):
    return np.full(np.broadcast(*[np.asarray(a, dtype=float) for a in args]).shape, float(value))


@dataclass(frozen=True)
class CoefficientSet:
    """Coefficients ``b, sigma, f, phi`` and the derivatives the adjoint equations need.

    ``D2f(t, x, y, z, u)`` returns the symmetric Hessian of ``f`` in
    ``(x, y, z)`` with shape ``(3, 3, *S)``.
    """

    b: Callable
    sigma: Callable
    f: Callable
    phi: Callable
    b_x: Callable
    b_xx: Callable
    sigma_x: Callable
    sigma_xx: Callable
    phi_x: Callable
    phi_xx: Callable
    f_x: Callable
    f_y: Callable
    f_z: Callable
    D2f: Callable


@dataclass(frozen=True)
class ControlProblem:
    coefficients: CoefficientSet
    controls: IntervalUnion
    T: float = 1.0
    t0: float = 0.0
    n: int = 1
    label: str = ""

    def __post_init__(self):
        if not (0 <= self.t0 < self.T < math.inf):
            raise ValueError(f"need 0 <= t0 < T < inf, got t0={self.t0}, T={self.T}")
        if self.n < 1:
            raise ValueError("state dimension must be >= 1")

    # shorthands used throughout the solvers
    def b(self, t, x, u):
        return self.coefficients.b(t, x, u)

    def sigma(self, t, x, u):
        return self.coefficients.sigma(t, x, u)

    def f(self, t, x, y, z, u):
        return self.coefficients.f(t, x, y, z, u)

    def phi(self, x):
        return self.coefficients.phi(x)


@dataclass(frozen=True)
class ReferencePoint:
    t: float
    x_bar: float
    u_bar: float
    sigma_bar: float

    @classmethod
    def at(cls, problem: ControlProblem, t, x_bar, u_bar) -> "ReferencePoint":
        return cls(t, x_bar, u_bar, problem.sigma(t, x_bar, u_bar))


# --------------------------------------------------------------------------
# closed forms registered with the built-in examples


@dataclass(frozen=True)
class ClosedForm:
    """Analytic value function and (where known) adjoint processes.

    ``adjoints(s, x, u)`` returns a mapping with any of ``p, q, P, Q`` that
    are known in closed form along a trajectory at state ``x`` under control
    value ``u``.  ``adjoint_validity`` describes for which controls it holds.
    """

    V: Callable
    V_t: Callable
    V_x: Callable
    V_xx: Callable
    smooth: Callable
    adjoints: Optional[Callable] = None
    adjoint_validity: str = ""
    description: str = ""


@dataclass(frozen=True)
class ExampleEntry:
    id: str
    problem: ControlProblem
    closed_form: ClosedForm
    formulas: Mapping[str, str]
    optimal_policy: Callable  # x0 -> policy description
    suboptimal_policy: Optional[dict] = None
    default_x0: float = 0.0
    basis: Mapping[str, object] = field(default_factory=dict)
    gap_source: Optional[Callable] = None
    hjb_domain: tuple = (-3.0, 3.0)
    mc_steps: int = 200  # time steps for adjoint solves along trajectories
    notes: str = ""


def _ex31() -> ExampleEntry:
    coeffs = CoefficientSet(
        b=lambda t, x, u: x * (1.0 + u) + _zeros(t),
        sigma=lambda t, x, u: x * u + _zeros(t),
        f=lambda t, x, y, z, u: -z * u + _zeros(t, x, y),
        phi=lambda x: np.asarray(x, dtype=float) * 1.0,
        b_x=lambda t, x, u: 1.0 + u + _zeros(t, x),
        b_xx=lambda t, x, u: _zeros(t, x, u),
        sigma_x=lambda t, x, u: u + _zeros(t, x),
        sigma_xx=lambda t, x, u: _zeros(t, x, u),
        phi_x=lambda x: _full(1.0, x),
        phi_xx=lambda x: _zeros(x),
        f_x=lambda t, x, y, z, u: _zeros(t, x, y, z, u),
        f_y=lambda t, x, y, z, u: _zeros(t, x, y, z, u),
        f_z=lambda t, x, y, z, u: -u + _zeros(t, x, y, z),
        D2f=lambda t, x, y, z, u: np.zeros((3, 3) + np.broadcast(t, x, y, z, u).shape),
    )
    T = 1.0
    problem = ControlProblem(coeffs, IntervalUnion(((-1.0, 0.0), (1.0, 2.0))), T=T, label="ex31")

    def V(t, x):
        x = np.asarray(x, dtype=float)
        return np.where(x <= 0, -np.exp(t - T) * x, -np.exp(T - t) * x)

    def V_t(t, x):
        x = np.asarray(x, dtype=float)
        return np.where(x <= 0, -np.exp(t - T) * x, np.exp(T - t) * x)

    def V_x(t, x):
        x = np.asarray(x, dtype=float)
        out = np.where(x < 0, -np.exp(t - T) + 0 * x, -np.exp(T - t) + 0 * x)
        return np.where(x == 0, np.nan, out)

    def V_xx(t, x):
        x = np.asarray(x, dtype=float)
        return np.where(x == 0, np.nan, 0.0 * x)

    def adjoints(s, x, u):
        # valid for a constant control u: p solves a linear ODE, q = P = Q = 0
        u = np.asarray(u, dtype=float)
        p = np.exp((1.0 + u - u * u) * (T - s)) + _zeros(x)
        zero = _zeros(s, x, u)
        return {"p": p, "q": zero, "P": zero, "Q": zero}

    closed = ClosedForm(
        V=V,
        V_t=V_t,
        V_x=V_x,
        V_xx=V_xx,
        smooth=lambda t, x: np.asarray(x) != 0,
        adjoints=adjoints,
        adjoint_validity="constant controls",
        description="V(t,x) = -e^(t-T) x for x<=0, -e^(T-t) x for x>0",
    )

    def optimal(x0):
        if x0 < 0:
            return {"constant": -1.0}
        if x0 > 0:
            return {"constant": 0.0}
        return {"constant": -1.0}

    return ExampleEntry(
        id="ex31",
        problem=problem,
        closed_form=closed,
        formulas={
            "b": "x*(1+u)",
            "sigma": "x*u",
            "f": "-z*u",
            "phi": "x",
            "U": str(problem.controls),
            "V": closed.description,
            "optimal": "u=-1 or 2 (x<0); u=0 or 1 (x>0); any u (x=0)",
        },
        optimal_policy=optimal,
        suboptimal_policy={"constant": 0.0},
        default_x0=-1.0,
        basis={"degree": 1, "localize_sign": True, "weighted": True},
        notes="value function has a concave kink at x=0",
    )


def _ln_ch_closed_form(adjoints, validity) -> ClosedForm:
    return ClosedForm(
        V=lambda t, x: -_expr.logcosh(np.asarray(x, dtype=float)) + _zeros(t),
        V_t=lambda t, x: _zeros(t, x),
        V_x=lambda t, x: -np.tanh(x) + _zeros(t),
        V_xx=lambda t, x: -sech2(x) + _zeros(t),
        smooth=lambda t, x: np.ones(np.broadcast(t, x).shape, dtype=bool),
        adjoints=adjoints,
        adjoint_validity=validity,
        description="V(t,x) = -ln ch x",
    )


def _ex32() -> ExampleEntry:
    def f(t, x, y, z, u):
        th = np.tanh(x)
        return 0.5 * (u * th) ** 2 - u * th - u * u - u - z + _zeros(t, y)

    def f_x(t, x, y, z, u):
        th, s2 = np.tanh(x), sech2(x)
        return u * u * th * s2 - u * s2 + _zeros(t, y, z)

    def D2f(t, x, y, z, u):
        th, s2 = np.tanh(x), sech2(x)
        fxx = u * u * (s2 * s2 - 2 * th * th * s2) + 2 * u * th * s2
        shape = np.broadcast(t, x, y, z, u).shape
        out = np.zeros((3, 3) + shape)
        out[0, 0] = fxx
        return out

    coeffs = CoefficientSet(
        b=lambda t, x, u: 2.0 * u + _zeros(t, x),
        sigma=lambda t, x, u: u + _zeros(t, x),
        f=f,
        phi=lambda x: _expr.logcosh(np.asarray(x, dtype=float)),
        b_x=lambda t, x, u: _zeros(t, x, u),
        b_xx=lambda t, x, u: _zeros(t, x, u),
        sigma_x=lambda t, x, u: _zeros(t, x, u),
        sigma_xx=lambda t, x, u: _zeros(t, x, u),
        phi_x=lambda x: np.tanh(x),
        phi_xx=lambda x: sech2(x),
        f_x=f_x,
        f_y=lambda t, x, y, z, u: _zeros(t, x, y, z, u),
        f_z=lambda t, x, y, z, u: _full(-1.0, t, x, y, z, u),
        D2f=D2f,
    )
    problem = ControlProblem(coeffs, IntervalUnion(((-3.0, -2.0), (1.0, 2.0))), T=1.0, label="ex32")

    def adjoints(s, x, u):
        th, s2 = np.tanh(x), sech2(x)
        return {"p": th + _zeros(s, u), "q": u * s2 + _zeros(s), "P": s2 + _zeros(s, u), "Q": -2 * u * s2 * th + _zeros(s)}

    return ExampleEntry(
        id="ex32",
        problem=problem,
        closed_form=_ln_ch_closed_form(adjoints, "any control"),
        formulas={
            "b": "2*u",
            "sigma": "u",
            "f": "0.5*(u*th(x))^2 - u*th(x) - u^2 - u - z",
            "phi": "ln(ch(x))",
            "U": str(problem.controls),
            "V": "V(t,x) = -ln ch x",
            "optimal": "u = -2",
        },
        optimal_policy=lambda x0: {"constant": -2.0},
        default_x0=0.5,
        basis={"kind": "spline", "knots": 24, "knot_placement": "uniform"},
        hjb_domain=(-6.0, 6.0),
        mc_steps=800,
        notes="smooth value function, -V_xx = P (equality case)",
    )


def _ex33() -> ExampleEntry:
    def f(t, x, y, z, u):
        th = np.tanh(x)
        return 0.5 * (u * th) ** 2 - 0.5 * th * th - u * u - z + _zeros(t, y)

    def f_x(t, x, y, z, u):
        th, s2 = np.tanh(x), sech2(x)
        return (u * u - 1.0) * th * s2 + _zeros(t, y, z)

    def D2f(t, x, y, z, u):
        th, s2 = np.tanh(x), sech2(x)
        fxx = (u * u - 1.0) * (s2 * s2 - 2 * th * th * s2)
        shape = np.broadcast(t, x, y, z, u).shape
        out = np.zeros((3, 3) + shape)
        out[0, 0] = fxx
        return out

    coeffs = CoefficientSet(
        b=lambda t, x, u: 2.0 * u + _zeros(t, x),
        sigma=lambda t, x, u: u + _zeros(t, x),
        f=f,
        phi=lambda x: _expr.logcosh(np.asarray(x, dtype=float)),
        b_x=lambda t, x, u: _zeros(t, x, u),
        b_xx=lambda t, x, u: _zeros(t, x, u),
        sigma_x=lambda t, x, u: _zeros(t, x, u),
        sigma_xx=lambda t, x, u: _zeros(t, x, u),
        phi_x=lambda x: np.tanh(x),
        phi_xx=lambda x: sech2(x),
        f_x=f_x,
        f_y=lambda t, x, y, z, u: _zeros(t, x, y, z, u),
        f_z=lambda t, x, y, z, u: _full(-1.0, t, x, y, z, u),
        D2f=D2f,
    )
    problem = ControlProblem(coeffs, IntervalUnion(((-1.0, 1.0), (2.0, 4.0))), T=1.0, label="ex33")

    def adjoints(s, x, u):
        # (p, q) along the optimal feedback u = th x; P is only bounded above
        th, s2 = np.tanh(x), sech2(x)
        return {"p": th + _zeros(s, u), "q": s2 * th + _zeros(s, u)}

    return ExampleEntry(
        id="ex33",
        problem=problem,
        closed_form=_ln_ch_closed_form(adjoints, "feedback u = th x"),
        formulas={
            "b": "2*u",
            "sigma": "u",
            "f": "0.5*(u*th(x))^2 - 0.5*th(x)^2 - u^2 - z",
            "phi": "ln(ch(x))",
            "U": str(problem.controls),
            "V": "V(t,x) = -ln ch x",
            "optimal": "u = th x (feedback)",
        },
        optimal_policy=lambda x0: {"feedback": "th(x)"},
        default_x0=0.5,
        basis={"kind": "spline", "knots": 24, "knot_placement": "uniform"},
        gap_source=lambda x: sech2(x) ** 2,
        hjb_domain=(-6.0, 6.0),
        mc_steps=800,
        notes="smooth value function, -V_xx > P strictly",
    )


_REGISTRY = {"ex31": _ex31, "ex32": _ex32, "ex33": _ex33}
_CACHE: dict = {}


def example_ids() -> list:
    return sorted(_REGISTRY)


def get_example(id: str) -> ExampleEntry:
    if id not in _REGISTRY:
        raise KeyError(f"unknown example {id!r}; known examples: {', '.join(example_ids())}")
    if id not in _CACHE:
        _CACHE[id] = _REGISTRY[id]()
    return _CACHE[id]


def builtin_example(id: str) -> ControlProblem:
    return get_example(id).problem


# --------------------------------------------------------------------------
# user problems from expression strings


def problem_from_expressions(
    b: str,
    sigma: str,
    f: str,
    phi: str,
    controls: Sequence,
    T: float = 1.0,
    t0: float = 0.0,
    label: str = "custom",
) -> ControlProblem:
    """Build a problem whose coefficients and derivatives come from :mod:`rsoc.expr`."""
    trees = {k: _expr.parse(src) for k, src in dict(b=b, sigma=sigma, f=f, phi=phi).items()}
    allowed = {"b": {"t", "x", "u"}, "sigma": {"t", "x", "u"}, "f": set(_expr.VARIABLES), "phi": {"x"}}
    for name, tree in trees.items():
        extra = _expr.free_variables(tree) - allowed[name]
        if extra:
            raise ValueError(f"{name} may not depend on {sorted(extra)}")

    def txu(tree, order):
        def value(t, x, u):
            return _expr.evaluate(tree, {"t": t, "x": x, "u": u})

        def deriv(t, x, u):
            jet = _expr.eval_jet2(tree, {"t": t, "x": x, "u": u}, ("x",))
            return jet.grad[0] if order == 1 else jet.hess[0, 0]

        return value if order == 0 else deriv

    fb, fs, ff, fp = trees["b"], trees["sigma"], trees["f"], trees["phi"]

    def f_jet(t, x, y, z, u):
        return _expr.eval_jet2(ff, {"t": t, "x": x, "y": y, "z": z, "u": u}, ("x", "y", "z"))

    def phi_jet(x):
        return _expr.eval_jet2(fp, {"x": x}, ("x",))

    coeffs = CoefficientSet(
        b=txu(fb, 0),
        sigma=txu(fs, 0),
        f=lambda t, x, y, z, u: f_jet(t, x, y, z, u).value,
        phi=lambda x: phi_jet(x).value,
        b_x=txu(fb, 1),
        b_xx=txu(fb, 2),
        sigma_x=txu(fs, 1),
        sigma_xx=txu(fs, 2),
        phi_x=lambda x: phi_jet(x).grad[0],
        phi_xx=lambda x: phi_jet(x).hess[0, 0],
        f_x=lambda t, x, y, z, u: f_jet(t, x, y, z, u).grad[0],
        f_y=lambda t, x, y, z, u: f_jet(t, x, y, z, u).grad[1],
        f_z=lambda t, x, y, z, u: f_jet(t, x, y, z, u).grad[2],
        D2f=lambda t, x, y, z, u: f_jet(t, x, y, z, u).hess,
    )
    return ControlProblem(coeffs, IntervalUnion(tuple(tuple(iv) for iv in controls)), T=T, t0=t0, label=label)


# --------------------------------------------------------------------------
# Hamiltonian-type functions


def eval_G(problem: ControlProblem, t, x, r, p, A, u):
    """Generalized Hamiltonian ``1/2 A sigma^2 + p b + f(t, x, r, sigma p, u)``."""
    problem.controls.require(u)
    s = problem.sigma(t, x, u)
    return 0.5 * A * s * s + p * problem.b(t, x, u) + problem.f(t, x, r, s * p, u)


def eval_H(problem: ControlProblem, t, x, y, z, u, p, q, P, ref: ReferencePoint):
    """Maximum-principle Hamiltonian with the second-order correction around ``ref``."""
    problem.controls.require(u)
    s = problem.sigma(t, x, u)
    ds = s - ref.sigma_bar
    return (
        problem.f(t, x, y, z + p * ds, u)
        + p * problem.b(t, x, u)
        + q * s
        + 0.5 * P * ds * ds
    )


def eval_H1(problem: ControlProblem, t, x, u, p_t, q_t, P_t, V_tx, ref: ReferencePoint, route: str = "G"):
    """Slope function of the time-jet relation.

    ``V_tx`` is the value-function level ``V(t, x)``; ``G`` is evaluated at
    ``r = -V_tx``.  ``route="G"`` uses the decomposition through
    :func:`eval_G`, ``route="expanded"`` writes every term out.
    """
    problem.controls.require(u)
    r = -np.asarray(V_tx, dtype=float)
    s = problem.sigma(t, x, u)
    cross = (q_t - P_t * ref.sigma_bar) * s
    if route == "G":
        return eval_G(problem, t, x, r, p_t, P_t, u) + cross
    if route == "expanded":
        return problem.f(t, x, r, s * p_t, u) + p_t * problem.b(t, x, u) + cross + 0.5 * P_t * s * s
    raise ValueError(f"unknown route {route!r}")


# --------------------------------------------------------------------------
# assumption checks


@dataclass(frozen=True)
class SampleSpec:
    n_points: int = 1000
    x_range: tuple = (-3.0, 3.0)
    yz_range: tuple = (-3.0, 3.0)
    fd_step: float = 1e-5
    seed: int = 0


@dataclass
class AssumptionReport:
    label: str
    n_points: int
    derivative_mismatch: dict
    lipschitz: dict
    growth: dict
    asymmetry: float

    @property
    def max_mismatch(self) -> float:
        return max(self.derivative_mismatch.values())

    def passed(self, tol: float = 1e-6) -> bool:
        return self.max_mismatch <= tol and self.asymmetry <= tol

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "n_points": self.n_points,
            "derivative_mismatch": self.derivative_mismatch,
            "max_mismatch": self.max_mismatch,
            "lipschitz": self.lipschitz,
            "growth": self.growth,
            "hessian_asymmetry": self.asymmetry,
        }


def _rel(a, ref) -> float:
    a = np.asarray(a, dtype=float)
    ref = np.asarray(ref, dtype=float)
    return float(np.max(np.abs(a - ref) / np.maximum(1.0, np.abs(ref))))


def check_assumptions(problem: ControlProblem, spec: SampleSpec = SampleSpec()) -> AssumptionReport:
    """Compare analytic derivatives with central differences on a random cloud.

    Second derivatives are compared against central differences of the
    analytic first derivatives.  Lipschitz and growth figures are empirical
    maxima over the cloud, not certificates.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.n_points
    c = problem.coefficients
    t = problem.t0 + (problem.T - problem.t0) * rng.random(n)
    x = rng.uniform(*spec.x_range, n)
    y = rng.uniform(*spec.yz_range, n)
    z = rng.uniform(*spec.yz_range, n)
    u = problem.controls.sample(n, rng)
    h = spec.fd_step

    def dx(fun, *args, pos):
        up = list(args)
        dn = list(args)
        up[pos] = up[pos] + h
        dn[pos] = dn[pos] - h
        return (fun(*up) - fun(*dn)) / (2 * h)

    mism = {
        "b_x": _rel(c.b_x(t, x, u), dx(c.b, t, x, u, pos=1)),
        "b_xx": _rel(c.b_xx(t, x, u), dx(c.b_x, t, x, u, pos=1)),
        "sigma_x": _rel(c.sigma_x(t, x, u), dx(c.sigma, t, x, u, pos=1)),
        "sigma_xx": _rel(c.sigma_xx(t, x, u), dx(c.sigma_x, t, x, u, pos=1)),
        "phi_x": _rel(c.phi_x(x), dx(c.phi, x, pos=0)),
        "phi_xx": _rel(c.phi_xx(x), dx(c.phi_x, x, pos=0)),
    }
    grads = (c.f_x, c.f_y, c.f_z)
    for i, name in enumerate(("f_x", "f_y", "f_z")):
        mism[name] = _rel(grads[i](t, x, y, z, u), dx(c.f, t, x, y, z, u, pos=1 + i))
    hess = c.D2f(t, x, y, z, u)
    for i, gi in enumerate(grads):
        for j in range(3):
            mism[f"D2f[{i},{j}]"] = _rel(hess[i, j], dx(gi, t, x, y, z, u, pos=1 + j))
    asym = float(np.max(np.abs(hess - np.swapaxes(hess, 0, 1))))

    lip = {
        "b": float(np.max(np.abs(c.b_x(t, x, u)))),
        "sigma": float(np.max(np.abs(c.sigma_x(t, x, u)))),
        "phi": float(np.max(np.abs(c.phi_x(x)))),
        "f_x": float(np.max(np.abs(c.f_x(t, x, y, z, u)))),
        "f_y": float(np.max(np.abs(c.f_y(t, x, y, z, u)))),
        "f_z": float(np.max(np.abs(c.f_z(t, x, y, z, u)))),
    }
    scale = 1.0 + np.abs(x)
    zero = np.zeros_like(x)
    growth = {
        "b": float(np.max(np.abs(c.b(t, x, u)) / scale)),
        "sigma": float(np.max(np.abs(c.sigma(t, x, u)) / scale)),
        "phi": float(np.max(np.abs(c.phi(x)) / scale)),
        "f": float(np.max(np.abs(c.f(t, x, zero, zero, u)) / scale)),
    }
    return AssumptionReport(problem.label, n, mism, lip, growth, asym)
