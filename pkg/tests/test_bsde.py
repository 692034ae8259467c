import csv
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import rms
from rsoc import bsde, model, sim
from rsoc.bsde import RegressionBasis

EX31 = model.get_example("ex31")
BASIS31 = bsde.basis_for(EX31.basis)

# sup_i E[Y_i^2] / (E phi^2 + E int f0^2), fitted on ex31 (u = -1, x = -1, seed 0)
MOMENT_C = 1.0 + 1e-2


def _paths(problem, policy, x0, M=2000, N=50, seed=0):
    g = sim.TimeGrid(problem.t0, problem.T, N)
    return sim.simulate_forward(problem, policy, g, sim.make_noise(g, M, seed), x0)


def _node_mask(paths, count=5):
    return [paths.grid.index(k / (count + 1)) for k in range(1, count + 1)]


# -- cost BSDE --------------------------------------------------------------


def test_constant_terminal_gives_constant_solution():
    prob = model.problem_from_expressions("1 + 0*x", "0.5", "0", "1", [(-1, 1)])
    sol = bsde.solve_bsde(prob, _paths(prob, {"constant": 0.0}, 0.3))
    assert np.max(np.abs(sol.Y - 1.0)) <= 1e-10
    assert np.max(np.abs(sol.Z)) <= 1e-10


def test_terminal_condition_is_exact(ex32_run):
    run = ex32_run
    ok = run.paths.ok
    assert np.array_equal(run.adj.cost.Y[ok, -1], run.problem.phi(run.paths.X[ok, -1]))
    assert np.array_equal(run.adj.first.p[ok, -1], np.tanh(run.paths.X[ok, -1]))


@pytest.mark.parametrize("u", [-1.0, 2.0])
def test_girsanov_closed_form(u):
    sol = bsde.solve_bsde(EX31.problem, _paths(EX31.problem, {"constant": u}, 1.0, M=20_000, N=200), BASIS31)
    assert abs(sol.Y0 - oracles.ex31_cost_y(0.0, 1.0, u)) <= 1e-2


def test_cost_functional_growth_case():
    mc = bsde.MonteCarloSpec(M=20_000, N=200, basis=BASIS31)
    J, se = bsde.cost_functional(EX31.problem, 0.0, 1.0, {"constant": 1.0}, mc)
    assert abs(J + oracles.E_1) <= 3e-2
    assert 0 < se < 1e-2


def test_cost_vanishes_on_the_kink(ex31_kink):
    assert np.all(ex31_kink.adj.cost.Y == 0.0)
    assert np.all(ex31_kink.adj.cost.Z == 0.0)


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 10**6), st.integers(0, 10**6))
def test_cost_is_seed_independent(s1, s2):
    mc = dict(M=4000, N=50, basis=BASIS31, batches=8)
    J1, e1 = bsde.cost_functional(EX31.problem, 0.0, 1.0, {"constant": -1.0}, bsde.MonteCarloSpec(seed=s1, **mc))
    J2, e2 = bsde.cost_functional(EX31.problem, 0.0, 1.0, {"constant": -1.0}, bsde.MonteCarloSpec(seed=s2, **mc))
    assert abs(J1 - J2) <= 3 * (e1 + e2)


COMPARISON_PATHS = _paths(EX31.problem, {"constant": 2.0}, 0.7, M=2000, N=40)


@settings(max_examples=15, deadline=None)
@given(
    st.floats(-1.0, 1.0),
    st.floats(-1.0, 1.0),
    st.floats(0.0, 1.0),
    st.floats(0.0, 1.0),
    st.floats(0.0, 0.5),
)
def test_comparison_of_ordered_drivers(a, b, c, d, e):
    lo_f = f"{a}*y - z*u + {b}*sin(x)"
    hi_f = f"{lo_f} + {c} + {d}*th(x)^2"
    lo = model.problem_from_expressions("x*(1+u)", "x*u", lo_f, "x", [(-1, 0), (1, 2)])
    hi = model.problem_from_expressions("x*(1+u)", "x*u", hi_f, f"x + {e}", [(-1, 0), (1, 2)])
    Y1 = bsde.solve_bsde(hi, COMPARISON_PATHS, BASIS31)
    Y2 = bsde.solve_bsde(lo, COMPARISON_PATHS, BASIS31)
    eps = 5 * max(Y1.residual_scale, Y2.residual_scale)
    assert np.all(Y1.Y >= Y2.Y - eps - 1e-12)


def test_picard_correction_changes_little():
    p = _paths(EX31.problem, {"constant": 2.0}, 1.0, M=5000, N=100)
    a = bsde.solve_bsde(EX31.problem, p, BASIS31)
    b = bsde.solve_bsde(EX31.problem, p, BASIS31, picard=True)
    assert abs(a.Y0 - b.Y0) <= 1e-2


@pytest.mark.parametrize("x0, u, seed", [(-1.0, -1.0, 0), (-1.0, 2.0, 1), (1.0, 2.0, 2), (1.0, 0.0, 3), (0.5, 1.0, 4)])
def test_moment_bound_guard(x0, u, seed):
    sol = bsde.solve_bsde(EX31.problem, _paths(EX31.problem, {"constant": u}, x0, M=5000, N=100, seed=seed), BASIS31)
    assert bsde.moment_bound_ratio(EX31.problem, sol) <= MOMENT_C


def test_basis_validation():
    with pytest.raises(ValueError):
        RegressionBasis(degree=0)
    with pytest.raises(ValueError):
        RegressionBasis(kind="fourier")
    with pytest.raises(ValueError):
        RegressionBasis(knot_placement="random")


EX32 = model.get_example("ex32")
EX32_PATHS = _paths(EX32.problem, {"constant": -2.0}, 0.5, M=20_000, N=200)


def _ex32_y0(basis):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", bsde.BasisDegradationWarning)
        return bsde.solve_bsde(EX32.problem, EX32_PATHS, basis).Y0


SPLINES = [
    bsde.basis_for(EX32.basis),
    RegressionBasis(kind="spline", knots=16, knot_placement="uniform"),
    RegressionBasis(kind="spline", knots=24, knot_placement="quantile"),
]


@pytest.mark.parametrize("basis", SPLINES + [RegressionBasis()])
def test_bases_reproduce_smooth_example(basis):
    assert abs(_ex32_y0(basis) - math.log(math.cosh(0.5))) <= 2e-2


def test_spline_variants_agree_on_shared_paths():
    y0 = [_ex32_y0(b) for b in SPLINES]
    assert max(y0) - min(y0) <= 5e-3


# -- first- and second-order adjoints ---------------------------------------


def test_first_order_adjoint_left_branch(ex31_left):
    run = ex31_left
    s = run.paths.grid.nodes
    idx = _node_mask(run.paths)
    assert rms(run.adj.first.p[:, idx] - np.exp(s[idx] - 1.0)) <= 2e-2
    assert rms(run.adj.first.q[:, idx]) <= 2e-2


def test_zero_data_gives_zero_adjoints():
    prob = model.problem_from_expressions("u", "1", "y - z", "3", [(-1, 1)])
    ab = bsde.solve_all(prob, _paths(prob, {"constant": 0.5}, 0.0), RegressionBasis())
    for arr in (ab.first.p, ab.first.q, ab.second.P, ab.second.Q):
        assert np.all(arr == 0.0)


def test_second_order_adjoint_smooth_example(ex32_run):
    run = ex32_run
    idx = _node_mask(run.paths)
    X = run.paths.X[:, idx]
    assert rms(run.adj.second.P[:, idx] - 1 / np.cosh(X) ** 2) <= 2e-2
    assert rms(run.adj.second.Q[:, idx] - 4 * np.tanh(X) / np.cosh(X) ** 2) <= 5e-2


def test_second_order_adjoint_vanishes_on_kinked_example(ex31_left, ex31_kink):
    for run in (ex31_left, ex31_kink):
        assert np.max(np.abs(run.adj.second.P)) == 0.0 and np.max(np.abs(run.adj.second.Q)) == 0.0


# -- adjoint FBSDE and its transform ----------------------------------------


@pytest.mark.parametrize("u", [-1.0, 2.0, 0.0])
def test_exponential_weight_closed_form(u):
    p = _paths(EX31.problem, {"constant": u}, -1.0)
    cost = bsde.solve_bsde(EX31.problem, p, BASIS31)
    q = bsde.exponential_weight(bsde.along(EX31.problem, cost), p)
    W = np.concatenate([np.zeros((p.M, 1)), np.cumsum(p.dW, axis=1)], axis=1)
    want = np.exp(-0.5 * u * u * p.grid.nodes - u * W)
    np.testing.assert_allclose(q, want, rtol=1e-12)


def test_fbsde_without_driver_dependence():
    prob = model.problem_from_expressions("-x", "0.5", "sin(x)", "x^2", [(-1, 1)])
    p = _paths(prob, {"constant": 0.0}, 0.4)
    cost = bsde.solve_bsde(prob, p)
    fb = bsde.solve_fbsde_adjoint(prob, p, cost)
    assert np.all(fb.qstar == 1.0)
    p_tr, q_tr = bsde.transform_adjoint(fb, np.zeros((p.M, p.grid.N)))
    np.testing.assert_array_equal(p_tr, -fb.pstar)
    np.testing.assert_array_equal(q_tr, -fb.kstar)


def test_fbsde_ratio_left_branch(ex31_left):
    run = ex31_left
    idx = _node_mask(run.paths)
    s = run.paths.grid.nodes[idx]
    ratio = -run.adj.fbsde.pstar[:, idx] / run.adj.fbsde.qstar[:, idx]
    assert rms(ratio - np.exp(s - 1.0)) <= 2e-2


@pytest.mark.parametrize("fixture", ["ex31_left", "ex32_run", "ex33_run"])
def test_transform_matches_first_order_adjoint(fixture, request):
    run = request.getfixturevalue(fixture)
    f_z = bsde.along(run.problem, run.adj.cost).f_z
    p_tr, _ = bsde.transform_adjoint(run.adj.fbsde, f_z)
    idx = _node_mask(run.paths)
    ok = run.paths.ok
    assert rms(p_tr[ok][:, idx] - run.adj.first.p[ok][:, idx]) <= 2e-2


def test_transform_rejects_nonpositive_weight():
    fb = bsde.FbsdeAdjoint(np.ones((2, 3)), np.array([[1.0, 0.5, -0.1], [1.0, 1.0, 1.0]]), np.zeros((2, 2)), 0.0)
    with pytest.raises(bsde.InvariantViolation):
        bsde.transform_adjoint(fb, np.zeros((2, 2)))


# -- export -----------------------------------------------------------------


def test_csv_exports(tmp_path, ex31_left):
    run = ex31_left
    bsde.write_cost_csv(run.adj.cost, tmp_path / "cost.csv", paths=[0, 1])
    bsde.write_adjoint_csv(run.adj, tmp_path / "adj.csv", paths=[3])
    cost = list(csv.DictReader(open(tmp_path / "cost.csv")))
    adj = list(csv.DictReader(open(tmp_path / "adj.csv")))
    N = run.paths.grid.N
    assert list(cost[0]) == ["path", "step", "t", "Y", "Z"] and len(cost) == 2 * (N + 1)
    assert list(adj[0]) == ["path", "step", "t", "p", "q", "P", "Q", "pstar", "qstar", "kstar"] and len(adj) == N + 1
    assert float(cost[5]["Y"]) == run.adj.cost.Y[0, 5]
    assert float(adj[7]["p"]) == run.adj.first.p[3, 7]
    assert cost[N]["Z"] == "" and adj[N]["kstar"] == ""
