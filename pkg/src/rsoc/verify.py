"""Numerical checks of the links between adjoint processes and the value function.

Every check samples a few interior checkpoint times on a fixed set of
witness paths and records one :class:`Sample` per (time, path, quantity).
A sample carries the raw ``deviation`` of the relation (positive means the
inequality is violated before any tolerance is applied) and the tolerance
it was judged against.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import jets
from .bsde import (
    BsdeSolution,
    FbsdeAdjoint,
    FirstOrderAdjoint,
    RegressionBasis,
    SecondOrderAdjoint,
    _linear_backward,
    along,
    solve_bsde,
    solve_first_order_adjoint,
    solve_second_order_adjoint,
    transform_adjoint,
)
from .hjb import ValueGrid
from .model import ClosedForm, ControlDomainError, ControlProblem, ReferencePoint, eval_G, eval_H, eval_H1
from .sim import PathBundle, TimeGrid, make_noise, policy_from_spec, simulate_forward

SCHEMA = "rsoc-report/1"
PASS, VACUOUS, FAIL, NOT_APPLICABLE = "pass", "vacuous-pass", "fail", "not-applicable"

N_CHECKPOINTS = 5
N_WITNESSES = 32


@dataclass(frozen=True)
class Tolerances:
    jet: float = 2e-2
    transform: float = 2e-2
    time_rel: float = 5e-2
    time_abs: float = 2e-2
    smooth: float = 2e-2
    smooth_q: float = 5e-2
    hamiltonian: float = 5e-3
    dpp: float = 2e-2
    gap_oracle: float = 2e-2

    def scaled(self, factor: float) -> "Tolerances":
        return Tolerances(**{k: v * factor for k, v in self.__dict__.items()})


# --------------------------------------------------------------------------
# report types


@dataclass(frozen=True)
class Sample:
    s: float
    path: int
    quantity: str
    value: float
    reference: float
    deviation: float
    tol: float
    status: str
    detail: str = ""

    @property
    def margin(self) -> float:
        """Signed slack of the relation; negative means it is violated."""
        return -self.deviation


def _judge(s, path, quantity, value, reference, deviation, tol, strict=False, detail="") -> Sample:
    deviation = float(deviation)
    ok = deviation < tol if strict else deviation <= tol
    return Sample(float(s), int(path), quantity, float(value), float(reference), deviation, float(tol), PASS if ok else FAIL, detail)


def _mark(s, path, quantity, status, detail="") -> Sample:
    nan = float("nan")
    return Sample(float(s), int(path), quantity, nan, nan, nan, nan, status, detail)


@dataclass
class RelationReport:
    check: str
    samples: list
    tolerances: dict
    value_source: str = "none"
    summary: dict = field(default_factory=dict)
    skipped: int = 0
    arrays: dict = field(default_factory=dict, repr=False)  # raw data kept out of serialization

    @property
    def status(self) -> str:
        states = {smp.status for smp in self.samples}
        if FAIL in states:
            return FAIL
        judged = states - {NOT_APPLICABLE}
        if not judged:
            return NOT_APPLICABLE
        return VACUOUS if judged == {VACUOUS} else PASS

    @property
    def passed(self) -> bool:
        return self.status in (PASS, VACUOUS, NOT_APPLICABLE)

    @property
    def sample_times(self) -> list:
        return sorted({smp.s for smp in self.samples})

    @property
    def failures(self) -> list:
        return [smp for smp in self.samples if smp.status == FAIL]

    def judged(self, quantity: Optional[str] = None) -> list:
        return [smp for smp in self.samples if np.isfinite(smp.deviation) and (quantity is None or smp.quantity == quantity)]

    @property
    def max_violation(self) -> float:
        devs = [smp.deviation for smp in self.judged()]
        return max(0.0, max(devs)) if devs else 0.0

    def worst(self) -> Optional[Sample]:
        judged = self.judged()
        if not judged:
            return None
        return max(judged, key=lambda smp: smp.deviation - smp.tol)

    def to_dict(self) -> dict:
        worst = self.worst()
        return {
            "schema": SCHEMA,
            "check": self.check,
            "status": self.status,
            "value_source": self.value_source,
            "tolerances": self.tolerances,
            "sample_times": self.sample_times,
            "max_violation": self.max_violation,
            "skipped": self.skipped,
            "worst": None if worst is None else worst.__dict__,
            "failures": [{"s": f.s, "path": f.path, "quantity": f.quantity, "deviation": f.deviation, "tol": f.tol} for f in self.failures],
            "summary": _jsonable(self.summary),
            "samples": [smp.__dict__ for smp in self.samples],
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(_jsonable(self.to_dict()), fh, indent=2, allow_nan=True)

    def write_csv(self, path) -> None:
        """Flat per-sample margins: ``check, s, path, quantity, value, reference, deviation, margin, tol, status``."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["check", "s", "path", "quantity", "value", "reference", "deviation", "margin", "tol", "status"])
            for smp in self.samples:
                w.writerow([self.check, "%.17g" % smp.s, smp.path, smp.quantity, "%.17g" % smp.value, "%.17g" % smp.reference,
                            "%.17g" % smp.deviation, "%.17g" % smp.margin, "%.17g" % smp.tol, smp.status])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


# --------------------------------------------------------------------------
# sampling


def checkpoint_nodes(grid: TimeGrid, count: int = N_CHECKPOINTS) -> list:
    """Nodes nearest to ``t0 + k (T - t0) / (count + 1)``, ``k = 1..count``."""
    return [grid.index(grid.t0 + k * (grid.T - grid.t0) / (count + 1)) for k in range(1, count + 1)]


def witness_paths(paths: PathBundle, count: int = N_WITNESSES, nodes=None, central: float = 0.98) -> np.ndarray:
    """First ``count`` paths inside the central ``central`` mass of the cross-section at every checkpoint.

    Regression estimates are least reliable in the sparse tails of the state
    distribution, so witnesses are drawn from the bulk.
    """
    ok = paths.ok.copy()
    nodes = checkpoint_nodes(paths.grid) if nodes is None else nodes
    if central < 1.0:
        tail = 0.5 * (1.0 - central)
        for i in nodes:
            x = paths.X[:, i]
            lo, hi = np.quantile(x[paths.ok], [tail, 1.0 - tail])
            ok &= (x >= lo) & (x <= hi)
    return np.flatnonzero(ok)[:count]


def _sampling(paths, nodes, witnesses):
    nodes = checkpoint_nodes(paths.grid) if nodes is None else list(nodes)
    witnesses = witness_paths(paths, nodes=nodes) if witnesses is None else np.asarray(witnesses)
    return nodes, witnesses


def _value_source(V):
    if V is None:
        return None
    if isinstance(V, ClosedForm):
        return jets.ClosedFormValue(V.V)
    return jets.as_value_source(V)


def _provenance(V) -> str:
    if V is None:
        return "none"
    if isinstance(V, (ValueGrid, jets.GridValue)):
        return "grid"
    return "closed-form"


def _smooth_flag(V, smooth):
    if smooth is not None:
        return smooth
    if isinstance(V, ClosedForm):
        return V.smooth
    return None


def _interval_distance(iv, p):
    lo, hi = iv
    return max(lo - p, p - hi)


# --------------------------------------------------------------------------
# spatial jets versus the adjoint pairs


def check_theorem_31(
    problem: ControlProblem,
    paths: PathBundle,
    first: FirstOrderAdjoint,
    second: SecondOrderAdjoint,
    V,
    tol: float = 2e-2,
    nodes=None,
    witnesses=None,
    schedule: Optional[jets.Schedule] = None,
) -> RelationReport:
    """``(-p, -P)`` must lie in the super-jet of ``V`` and bound its sub-jet."""
    src = _value_source(V)
    nodes, witnesses = _sampling(paths, nodes, witnesses)
    t = paths.grid.nodes
    samples, skipped = [], 0
    counts = {jets.INSIDE: 0, jets.BOUNDARY: 0, jets.OUTSIDE: 0}
    for i in nodes:
        for m in witnesses:
            s, x = t[i], paths.X[m, i]
            mp, mP = -first.p[m, i], -second.P[m, i]
            try:
                est = jets.estimate_spatial_jets(src, s, x, schedule)
            except (ValueError, FloatingPointError):
                skipped += 1
                continue
            counts[jets.test_membership(est, mp, mP, tol, "super")] += 1
            if est.super_empty:
                samples.append(_judge(s, m, "super-jet p", mp, np.nan, np.inf, tol, detail="empty super-jet"))
            else:
                lo, hi = est.p_interval_super
                samples.append(_judge(s, m, "super-jet p", mp, 0.5 * (lo + hi), _interval_distance(est.p_interval_super, mp), tol))
                samples.append(_judge(s, m, "super-jet P", mP, est.P_threshold_super, est.P_threshold_super - mP, tol))
            if est.sub_empty:
                samples.append(_mark(s, m, "sub-jet", VACUOUS, "empty sub-jet"))
            else:
                lo, hi = est.p_interval_sub
                samples.append(_judge(s, m, "sub-jet p", mp, 0.5 * (lo + hi), max(abs(lo - mp), abs(hi - mp)), tol))
                samples.append(_judge(s, m, "sub-jet P", mP, est.P_threshold_sub, est.P_threshold_sub - mP, tol))
    return RelationReport("thm31", samples, {"jet": tol}, _provenance(V), {"membership": counts}, skipped)


def check_theorem_32(
    problem: ControlProblem,
    paths: PathBundle,
    fbsde: FbsdeAdjoint,
    first: FirstOrderAdjoint,
    V=None,
    tol: float = 2e-2,
    nodes=None,
    witnesses=None,
) -> RelationReport:
    """The exponential-form adjoint maps onto ``p`` and sits in the first-order jet band."""
    nodes, witnesses = _sampling(paths, nodes, witnesses)
    p_tr, _ = transform_adjoint(fbsde, np.zeros_like(fbsde.kstar))
    src = _value_source(V)
    t = paths.grid.nodes
    samples = []
    diffs = np.abs(p_tr[np.ix_(witnesses, nodes)] - first.p[np.ix_(witnesses, nodes)])
    for a, m in enumerate(witnesses):
        for b, i in enumerate(nodes):
            samples.append(_judge(t[i], m, "transform p", p_tr[m, i], first.p[m, i], diffs[a, b], tol))
            if src is None:
                continue
            est = jets.estimate_spatial_jets(src, t[i], paths.X[m, i])
            iv = est.p_interval_super if not est.super_empty else est.p_interval_sub
            ratio = -p_tr[m, i]  # p* / q*
            samples.append(_judge(t[i], m, "jet band", ratio, 0.5 * (iv[0] + iv[1]), _interval_distance(iv, ratio), tol))
    summary = {
        "rms": float(np.sqrt(np.mean(diffs**2))),
        "max_pathwise_rms": float(np.max(np.sqrt(np.mean(diffs**2, axis=1)))),
        "max": float(np.max(diffs)),
    }
    return RelationReport("thm32", samples, {"transform": tol}, _provenance(V), summary)


# --------------------------------------------------------------------------
# right time jets versus H1


def h1_along(problem: ControlProblem, paths: PathBundle, first: FirstOrderAdjoint, second: SecondOrderAdjoint, V, i: int, rows, route: str = "G", P=None):
    """``H1(s, X(s), u(s))`` at node ``i`` for the given rows, with ``sigma_bar`` taken on the trajectory.

    Returns ``(H1, scale)`` where ``scale`` sums the magnitudes of the
    individual terms; it sets the yardstick for relative errors when the
    terms cancel.  ``P`` overrides the second-order adjoint when given.
    """
    src = _value_source(V)
    s = paths.grid.nodes[i]
    x, u = paths.X[rows, i], paths.u[rows, i]
    p = first.p[rows, i]
    P = second.P[rows, i] if P is None else np.asarray(P, dtype=float)
    q = first.q[rows, min(i, first.q.shape[1] - 1)]
    ref = ReferencePoint.at(problem, s, x, u)
    v = src(s, x)
    H1 = eval_H1(problem, s, x, u, p, q, P, v, ref, route)
    sig = ref.sigma_bar
    terms = (0.5 * P * sig * sig, p * problem.b(s, x, u), problem.f(s, x, -v, sig * p, u), (q - P * sig) * sig)
    return H1, sum(np.abs(t) for t in terms)


def check_theorem_33(
    problem: ControlProblem,
    paths: PathBundle,
    first: FirstOrderAdjoint,
    second: SecondOrderAdjoint,
    V,
    tol_rel: float = 5e-2,
    tol_abs: float = 2e-2,
    smooth: Optional[Callable] = None,
    nodes=None,
    witnesses=None,
    schedule: Optional[jets.Schedule] = None,
) -> RelationReport:
    """Upper right Dini derivative of ``s -> V(s, X)`` is bounded by ``H1``.

    The tolerance is ``max(tol_abs, tol_rel * scale)`` with ``scale`` the
    summed magnitude of the terms of ``H1`` (see :func:`h1_along`); with a
    single term this is the plain relative error.

    Where ``V`` is smooth the slope is also compared for equality.  The
    inclusions only give ``V_t <= H1``; the two sides differ by
    ``(-V_xx - P) sigma_bar^2 / 2``.  The equality reference therefore
    evaluates ``H1`` with ``P`` replaced by ``-V_xx`` whenever a closed-form
    curvature is available; it coincides with ``H1`` when that gap vanishes.
    """
    src = _value_source(V)
    smooth = _smooth_flag(V, smooth)
    nodes, witnesses = _sampling(paths, nodes, witnesses)
    t = paths.grid.nodes
    samples = []
    for i in nodes:
        s = t[i]
        x = paths.X[witnesses, i]
        H1, scale = h1_along(problem, paths, first, second, src, i, witnesses)
        dini = jets.estimate_time_jets(src, s, x, schedule, T=problem.T)
        regular = np.asarray(smooth(s, x), dtype=bool) if smooth is not None else np.zeros(x.shape, dtype=bool)
        H1_eq = H1
        if regular.any() and isinstance(V, ClosedForm):
            with np.errstate(invalid="ignore"):
                curv = np.where(regular, -(V.V_xx(s, np.where(regular, x, 1.0)) + 0 * x), second.P[witnesses, i])
            H1_eq, _ = h1_along(problem, paths, first, second, src, i, witnesses, P=curv)
        for k, m in enumerate(witnesses):
            tol = max(tol_abs, tol_rel * scale[k])
            samples.append(_judge(s, m, "upper dini", dini.upper_dini[k], H1[k], dini.upper_dini[k] - H1[k], tol))
            if regular[k]:
                samples.append(_judge(s, m, "slope = H1", dini.slope[k], H1_eq[k], abs(dini.slope[k] - H1_eq[k]), tol))
    return RelationReport("thm33", samples, {"time_rel": tol_rel, "time_abs": tol_abs}, _provenance(V))


# --------------------------------------------------------------------------
# smooth value functions


def _max_G(problem, s, x, V: ClosedForm, u_grid):
    """``max_u G(s, x, -V, -V_x, -V_xx, u)`` over a control grid, vectorized over ``x``."""
    x = np.asarray(x, dtype=float)[..., None]
    G = eval_G(problem, s, x, -V.V(s, x), -V.V_x(s, x), -V.V_xx(s, x), u_grid[None, :])
    return G.max(axis=-1)


def check_smooth_case(
    problem: ControlProblem,
    paths: PathBundle,
    first: FirstOrderAdjoint,
    second: SecondOrderAdjoint,
    V: ClosedForm,
    tol: float = 2e-2,
    tol_q: float = 5e-2,
    control_step: float = 1e-2,
    nodes=None,
    witnesses=None,
    items: Sequence[str] = ("i", "ii", "iii", "iv"),
) -> RelationReport:
    """Adjoints against closed-form derivatives where ``V`` is twice differentiable.

    (i) ``p = -V_x``, (ii) ``q = -V_xx sigma_bar``, (iii) ``-V_xx >= P``,
    (iv) ``V_t = max_u G``.  Non-smooth points are marked not-applicable.
    Item (ii) is judged against ``tol_q``: ``q`` is a ``dW``-regression
    coefficient and carries more Monte Carlo error than ``p`` or ``P``.
    """
    nodes, witnesses = _sampling(paths, nodes, witnesses)
    t = paths.grid.nodes
    u_grid = problem.controls.grid(control_step)
    samples = []
    excess = []
    for i in nodes:
        s = t[i]
        x, u = paths.X[witnesses, i], paths.u[witnesses, i]
        smooth = np.asarray(V.smooth(s, x), dtype=bool) & np.ones(x.shape, dtype=bool)
        with np.errstate(invalid="ignore"):
            Vx, Vxx, Vt = V.V_x(s, x) + 0 * x, V.V_xx(s, x) + 0 * x, V.V_t(s, x) + 0 * x
        sig = problem.sigma(s, x, u)
        p, q, P = first.p[witnesses, i], first.q[witnesses, min(i, first.q.shape[1] - 1)], second.P[witnesses, i]
        gmax = _max_G(problem, s, np.where(smooth, x, 1.0), V, u_grid)
        for k, m in enumerate(witnesses):
            if not smooth[k]:
                for item in items:
                    samples.append(_mark(s, m, f"({item})", NOT_APPLICABLE, "value function not smooth here"))
                continue
            if "i" in items:
                samples.append(_judge(s, m, "(i) p = -V_x", p[k], -Vx[k], abs(p[k] + Vx[k]), tol))
            if "ii" in items:
                samples.append(_judge(s, m, "(ii) q = -V_xx sigma", q[k], -Vxx[k] * sig[k], abs(q[k] + Vxx[k] * sig[k]), tol_q))
            if "iii" in items:
                gap = -Vxx[k] - P[k]
                excess.append(gap)
                samples.append(_judge(s, m, "(iii) -V_xx >= P", P[k], -Vxx[k], -gap, tol))
            if "iv" in items:
                samples.append(_judge(s, m, "(iv) V_t = max G", Vt[k], gmax[k], abs(Vt[k] - gmax[k]), tol))
    summary = {}
    if excess:
        summary = {"min_second_order_gap": float(np.min(excess)), "max_abs_second_order_gap": float(np.max(np.abs(excess)))}
    return RelationReport("smooth", samples, {"smooth": tol, "smooth_q": tol_q}, "closed-form", summary)


# --------------------------------------------------------------------------
# maximum condition


def hamiltonian_gap(problem: ControlProblem, s, x, y, z, u_bar, p, q, P, u_grid, scale: float = 1.0, tie: float = 1e-6):
    """Return ``(gap, maximizers)`` for ``scale * H`` over ``u_grid``.

    Maximizers are the grid controls within ``tie`` of the maximum relative
    to the spread of ``H`` over the grid, so the set does not depend on a
    positive rescaling.
    """
    ref = ReferencePoint.at(problem, s, x, u_bar)
    Hs = scale * eval_H(problem, s, x, y, z, u_grid, p, q, P, ref)
    Hbar = scale * eval_H(problem, s, x, y, z, u_bar, p, q, P, ref)
    top = float(np.max(Hs))
    spread = top - float(np.min(Hs))
    maximizers = u_grid[Hs >= top - tie * spread]
    return max(top, float(Hbar)) - float(Hbar), maximizers


def closed_form_adjoints(V: ClosedForm, paths: PathBundle) -> dict:
    """Evaluate the registered closed-form adjoints on every path and node."""
    if V.adjoints is None:
        raise ValueError("no closed-form adjoints registered")
    t = paths.grid.nodes[None, :]
    return {k: np.asarray(v, dtype=float) + np.zeros(paths.X.shape) for k, v in V.adjoints(t, paths.X, paths.u).items()}


def check_maximum_principle(
    problem: ControlProblem,
    paths: PathBundle,
    first: FirstOrderAdjoint,
    second: SecondOrderAdjoint,
    cost: BsdeSolution,
    tol: float = 5e-3,
    z_mode: str = "regression",
    V: Optional[ClosedForm] = None,
    adjoints: Optional[dict] = None,
    control_step: float = 1e-3,
    nodes=None,
    witnesses=None,
) -> RelationReport:
    """``max_u H - H(u_bar)`` at sampled points.

    ``adjoints`` may replace the regression ``p, q, P`` by arrays of shape
    ``(M, N+1)``; ``z_mode="identity"`` takes ``Z = -V_x sigma_bar`` from a
    closed-form ``V`` instead of the cost regression.
    """
    if z_mode not in ("regression", "identity"):
        raise ValueError("z_mode must be 'regression' or 'identity'")
    if z_mode == "identity" and V is None:
        raise ValueError("identity mode needs a closed-form value function")
    nodes, witnesses = _sampling(paths, nodes, witnesses)
    t = paths.grid.nodes
    u_grid = problem.controls.grid(control_step)
    nq = first.q.shape[1]
    src = adjoints or {}
    p_all = src.get("p", first.p)
    q_all = src.get("q", first.q)
    P_all = src.get("P", second.P)
    samples, maximizer_sets = [], {}
    for i in nodes:
        s = t[i]
        for m in witnesses:
            x, ub = paths.X[m, i], paths.u[m, i]
            if z_mode == "identity":
                z = -V.V_x(s, x) * problem.sigma(s, x, ub)
            else:
                z = cost.Z[m, min(i, nq - 1)]
            qi = q_all[m, min(i, q_all.shape[1] - 1)]
            gap, arg = hamiltonian_gap(problem, s, x, cost.Y[m, i], z, ub, p_all[m, i], qi, P_all[m, i], u_grid)
            maximizer_sets[(i, int(m))] = arg
            detail = "maximizers " + ",".join(f"{a:g}" for a in _cluster(arg, control_step))
            samples.append(_judge(s, m, "H gap", gap, 0.0, gap, tol, detail=detail))
    gaps = [smp.deviation for smp in samples]
    summary = {"max_gap": max(gaps), "min_gap": min(gaps), "adjoints": "closed-form" if adjoints else "regression", "z_mode": z_mode}
    return RelationReport("mp", samples, {"hamiltonian": tol}, _provenance(V), summary, arrays={"maximizers": maximizer_sets})


def _cluster(values, step):
    """Representatives of runs of adjacent grid values."""
    values = np.sort(np.asarray(values))
    if values.size == 0:
        return []
    breaks = np.flatnonzero(np.diff(values) > 1.5 * step) + 1
    return [float(np.median(run)) for run in np.split(values, breaks)]


# --------------------------------------------------------------------------
# maximum condition recovered from the value function


def derive_mp_from_dpp(
    problem: ControlProblem,
    V: ClosedForm,
    paths: PathBundle,
    first: FirstOrderAdjoint,
    second: SecondOrderAdjoint,
    cost: BsdeSolution,
    tol: float = 2e-2,
    control_step: float = 1e-2,
    nodes=None,
    witnesses=None,
) -> RelationReport:
    """Walk from the verification condition on ``G`` to the maximum condition on ``H``.

    (a) ``u_bar`` maximizes ``G(s, X, -V, -V_x, -V_xx, .)``;
    (b) ``H1(u_bar) - H1(u) >= -1/2 (P + V_xx)(sigma - sigma_bar)^2`` with the
        correction term non-negative;
    (c) ``u_bar`` maximizes ``H`` with ``Z = sigma_bar p``.

    Along the way ``p = -V_x`` and ``q = -V_xx sigma_bar`` are used, as in
    the smooth case; ``P`` comes from the second-order adjoint solve.
    """
    nodes, witnesses = _sampling(paths, nodes, witnesses)
    t = paths.grid.nodes
    u_grid = problem.controls.grid(control_step)
    samples = []
    stage_min = {"a": np.inf, "b": np.inf, "b_correction": np.inf, "c": np.inf}
    for i in nodes:
        s = t[i]
        for m in witnesses:
            x, ub = paths.X[m, i], paths.u[m, i]
            if not bool(V.smooth(s, x)):
                for stage in ("a", "b", "c"):
                    samples.append(_mark(s, m, f"stage {stage}", NOT_APPLICABLE, "value function not smooth here"))
                continue
            v, vx, vxx = float(V.V(s, x)), float(V.V_x(s, x)), float(V.V_xx(s, x))
            G = eval_G(problem, s, x, -v, -vx, -vxx, u_grid)
            Gbar = float(eval_G(problem, s, x, -v, -vx, -vxx, ub))
            dev_a = max(float(G.max()) - Gbar, 0.0)
            sa = _judge(s, m, "stage a: G max", Gbar, float(G.max()), dev_a, tol)
            samples.append(sa)
            stage_min["a"] = min(stage_min["a"], sa.margin)
            if sa.status == FAIL:
                samples.append(_mark(s, m, "stage b", NOT_APPLICABLE, "stage a failed"))
                samples.append(_mark(s, m, "stage c", NOT_APPLICABLE, "stage a failed"))
                continue
            ref = ReferencePoint.at(problem, s, x, ub)
            p, P = -vx, second.P[m, i]
            q = -vxx * ref.sigma_bar
            H1 = eval_H1(problem, s, x, u_grid, p, q, P, v, ref)
            H1bar = float(eval_H1(problem, s, x, ub, p, q, P, v, ref))
            corr = -0.5 * (P + vxx) * (problem.sigma(s, x, u_grid) - ref.sigma_bar) ** 2
            inter = H1bar - H1 - corr
            sb = _judge(s, m, "stage b: intermediate", float(np.min(inter)), 0.0, -float(np.min(inter)), tol)
            sc_ = _judge(s, m, "stage b: correction sign", P, -vxx, P + vxx, tol)
            samples += [sb, sc_]
            stage_min["b"] = min(stage_min["b"], sb.margin)
            stage_min["b_correction"] = min(stage_min["b_correction"], sc_.margin)
            gap, _ = hamiltonian_gap(problem, s, x, -v, ref.sigma_bar * p, ub, p, q, P, u_grid)
            scc = _judge(s, m, "stage c: H max", gap, 0.0, gap, tol)
            samples.append(scc)
            stage_min["c"] = min(stage_min["c"], scc.margin)
    summary = {"stage_margins": {k: (None if not np.isfinite(v) else float(v)) for k, v in stage_min.items()}}
    return RelationReport("dpp-to-mp", samples, {"dpp": tol}, "closed-form", summary)


# --------------------------------------------------------------------------
# strict second-order gap


def strict_gap_check(
    problem: ControlProblem,
    paths: PathBundle,
    cost: BsdeSolution,
    second: SecondOrderAdjoint,
    V: ClosedForm,
    gap_source: Callable,
    basis: RegressionBasis = RegressionBasis(),
    tol: float = 2e-2,
    nodes=None,
    witnesses=None,
) -> RelationReport:
    """``-V_xx - P`` against an independent solve of its own linear BSDE.

    The gap solves a BSDE with the second-order adjoint's linear part and
    source ``gap_source(X)`` and vanishes at the horizon.
    """
    nodes, witnesses = _sampling(paths, nodes, witnesses)
    t = paths.grid.nodes
    N = paths.grid.N
    tr = along(problem, cost)
    X = paths.X

    def driver(i, ok, y, z):
        n = tr.at(i, ok)
        a = n.f_y + 2.0 * (n.f_z * n.sigma_x + n.b_x) + n.sigma_x**2
        c = n.f_z + 2.0 * n.sigma_x
        return a * y + c * z + gap_source(X[ok, i])

    oracle, _, _ = _linear_backward(paths, basis, np.zeros(int(paths.ok.sum())), driver)
    gap = -V.V_xx(t[None, :], X) - second.P
    samples = []
    for i in nodes:
        for m in witnesses:
            samples.append(_judge(t[i], m, "gap > 0", gap[m, i], 0.0, -gap[m, i], 0.0, strict=True))
            samples.append(_judge(t[i], m, "gap = oracle", gap[m, i], oracle[m, i], abs(gap[m, i] - oracle[m, i]), tol))
    for m in witnesses:
        samples.append(_judge(t[N], m, "terminal gap", gap[m, N], 0.0, abs(gap[m, N]), 0.0))
    pick = np.ix_(witnesses, nodes)
    summary = {"min_gap": float(np.min(gap[pick])), "max_oracle_error": float(np.max(np.abs(gap[pick] - oracle[pick])))}
    return RelationReport("strict-gap", samples, {"gap_oracle": tol}, "closed-form", summary, arrays={"oracle": oracle, "gap": gap})


# --------------------------------------------------------------------------
# candidate screening


@dataclass
class Candidate:
    name: str
    policy: object
    passed: bool
    margins: dict
    verified: Optional[bool] = None


@dataclass
class CandidateSet:
    candidates: list
    controls: object

    def __post_init__(self):
        for c in self.survivors:
            value = getattr(c.policy, "value", None)
            if value is not None and not bool(self.controls.contains(value)):
                raise ControlDomainError(f"survivor {c.name} lies outside {self.controls}")

    @property
    def survivors(self) -> list:
        return [c for c in self.candidates if c.passed]

    @property
    def survivor_names(self) -> list:
        return [c.name for c in self.survivors]

    def constant_survivors(self) -> np.ndarray:
        return np.array([c.policy.value for c in self.survivors if hasattr(c.policy, "value")])

    def to_dict(self) -> dict:
        return _jsonable({"candidates": [c.__dict__ | {"policy": c.name} for c in self.candidates], "survivors": self.survivor_names})


def constant_family(problem: ControlProblem, step: float) -> list:
    return [{"constant": float(u)} for u in problem.controls.grid(step)]


def screen_candidates(
    problem: ControlProblem,
    V,
    family: Sequence,
    x0: float,
    M: int = 5000,
    N: int = 100,
    seed: int = 0,
    basis: RegressionBasis = RegressionBasis(),
    tol: float = 2e-2,
    smooth_value: Optional[ClosedForm] = None,
    verify_survivors: bool = False,
) -> CandidateSet:
    """Keep the policies whose adjoints are consistent with the jets of ``V``.

    Each candidate is simulated on common noise; survivors of the jet check
    (and of smooth-case items (i) and (iii) when ``smooth_value`` is given)
    optionally go through the maximum condition and the time relation.
    """
    grid = TimeGrid(problem.t0, problem.T, N)
    noise = make_noise(grid, M, seed)
    out = []
    for spec in family:
        policy = policy_from_spec(spec)
        paths = simulate_forward(problem, policy, grid, noise, x0)
        cost = solve_bsde(problem, paths, basis)
        first = solve_first_order_adjoint(problem, paths, cost, basis)
        second = solve_second_order_adjoint(problem, paths, cost, first, basis)
        reports = [check_theorem_31(problem, paths, first, second, V, tol)]
        if smooth_value is not None:
            reports.append(check_smooth_case(problem, paths, first, second, smooth_value, tol, items=("i", "iii")))
        margins = {r.check: min((smp.margin + smp.tol for smp in r.judged()), default=np.inf) for r in reports}
        passed = all(r.passed for r in reports)
        verified = None
        if passed and verify_survivors:
            extra = [
                check_maximum_principle(problem, paths, first, second, cost, tol=tol, control_step=1e-2),
                check_theorem_33(problem, paths, first, second, V),
            ]
            verified = all(r.passed for r in extra)
        out.append(Candidate(getattr(policy, "name", str(spec)), policy, passed, margins, verified))
    return CandidateSet(out, problem.controls)
