import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rsoc import model
from rsoc.model import ControlDomainError, IntervalUnion, ReferencePoint, eval_G, eval_H, eval_H1

EX31 = model.builtin_example("ex31")
EX32 = model.builtin_example("ex32")
EX33 = model.builtin_example("ex33")

reals = st.floats(-3.0, 3.0, allow_nan=False)


# -- control sets -----------------------------------------------------------


def test_interval_union_validation():
    with pytest.raises(ValueError):
        IntervalUnion(())
    with pytest.raises(ValueError):
        IntervalUnion(((1.0, 0.0),))
    with pytest.raises(ValueError):
        IntervalUnion(((0.0, 1.0), (1.0, 2.0)))  # touching
    with pytest.raises(ValueError):
        IntervalUnion(((2.0, 3.0), (0.0, 1.0)))  # decreasing


def test_membership_uses_endpoint_tolerance():
    U = IntervalUnion(((-1.0, 0.0), (1.0, 2.0)))
    assert U.contains(2.0 + 5e-13) and not U.contains(2.0 + 1e-9)
    assert not U.contains(0.5)
    with pytest.raises(ControlDomainError):
        U.require(0.5)


def test_control_grid_includes_endpoints():
    g = IntervalUnion(((-1.0, 0.0), (1.0, 2.0))).grid(0.3)
    for end in (-1.0, 0.0, 1.0, 2.0):
        assert end in g
    assert np.all(IntervalUnion(((-1.0, 0.0), (1.0, 2.0))).contains(g))


@given(st.lists(st.tuples(reals, st.floats(0.0, 1.0)), min_size=1, max_size=4), st.integers(0, 1000))
def test_samples_and_projection_stay_inside(parts, seed):
    ivs, lo = [], -10.0
    for gap, width in parts:
        lo = lo + abs(gap) + 0.1
        ivs.append((lo, lo + width))
        lo = lo + width
    U = IntervalUnion(tuple(ivs))
    rng = np.random.default_rng(seed)
    assert np.all(U.contains(U.sample(200, rng)))
    assert np.all(U.contains(U.project(rng.uniform(-20, 20, 200))))


def test_problem_invariants():
    with pytest.raises(ValueError):
        model.ControlProblem(EX31.coefficients, EX31.controls, T=1.0, t0=1.0)
    with pytest.raises(ValueError):
        model.ControlProblem(EX31.coefficients, EX31.controls, n=0)


# -- examples ---------------------------------------------------------------


def test_registry():
    assert model.example_ids() == ["ex31", "ex32", "ex33"]
    with pytest.raises(KeyError, match="ex99"):
        model.get_example("ex99")


def test_ex31_coefficients():
    x, u = np.array([-1.5, 0.3]), np.array([-1.0, 2.0])
    np.testing.assert_array_equal(EX31.b(0.2, x, u), x * (1 + u))
    np.testing.assert_array_equal(EX31.sigma(0.2, x, u), x * u)
    np.testing.assert_array_equal(EX31.f(0.2, x, 0.4, 1.5, u), -1.5 * u)
    np.testing.assert_array_equal(EX31.phi(x), x)
    assert EX31.controls.intervals == ((-1.0, 0.0), (1.0, 2.0))


@pytest.mark.parametrize("problem, intervals", [(EX32, ((-3.0, -2.0), (1.0, 2.0))), (EX33, ((-1.0, 1.0), (2.0, 4.0)))])
def test_ln_ch_examples(problem, intervals):
    x, u = np.array([-0.4, 0.7]), np.array([intervals[0][0], intervals[1][1]])
    np.testing.assert_array_equal(problem.b(0.0, x, u), 2 * u)
    np.testing.assert_array_equal(problem.sigma(0.0, x, u), u)
    np.testing.assert_allclose(problem.phi(x), np.log(np.cosh(x)), rtol=1e-14)
    assert problem.controls.intervals == intervals


def test_reference_point_stores_exact_sigma():
    ref = ReferencePoint.at(EX31, 0.3, -1.2, 2.0)
    assert ref.sigma_bar == EX31.sigma(0.3, -1.2, 2.0)


# -- G, H, H1 ---------------------------------------------------------------


@given(reals, reals, reals, reals)
def test_G_with_zero_control_is_linear_drift(x, r, p, A):
    assert eval_G(EX31, 0.4, x, r, p, A, 0.0) == pytest.approx(p * x, abs=1e-12)


def test_G_hand_composition():
    assert eval_G(EX31, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0) == pytest.approx(1.0, abs=1e-15)


@given(reals, reals, reals, reals, st.sampled_from(list(EX31.controls.grid(0.25))))
def test_G_matches_the_kinked_hjb_supremand(x, v, vx, vxx, u):
    braced = -0.5 * vxx * x * x * u * u + u * u * vx * x - u * vx * x
    assert eval_G(EX31, 0.5, x, -v, -vx, -vxx, u) + vx * x == pytest.approx(braced, abs=1e-10)


def test_G_rejects_controls_outside_U():
    with pytest.raises(ControlDomainError):
        eval_G(EX31, 0.0, 1.0, 0.0, 1.0, 0.0, 0.5)


@given(reals, reals, reals, reals, reals, reals, st.sampled_from([-3.0, -2.5, -2.0, 1.0, 2.0]))
def test_H_at_reference_drops_quadratic_term(x, y, z, p, q, P, u):
    ref = ReferencePoint.at(EX32, 0.2, x, u)
    want = EX32.f(0.2, x, y, z, u) + p * EX32.b(0.2, x, u) + q * ref.sigma_bar
    assert eval_H(EX32, 0.2, x, y, z, u, p, q, P, ref) == pytest.approx(want, abs=1e-12)


@given(reals, reals, reals, reals, reals, st.sampled_from(list(EX31.controls.grid(0.5))))
def test_H_minus_G_is_driver_shift_when_driver_is_linear_in_z(x, y, z, p, q, u):
    ref = ReferencePoint(0.1, x, u, 0.0)
    lhs = eval_H(EX31, 0.1, x, y, z, u, p, q, 0.0, ref) - eval_G(EX31, 0.1, x, y, p, 0.0, u) - q * EX31.sigma(0.1, x, u)
    rhs = EX31.f(0.1, x, y, z, u) - EX31.f(0.1, x, y, 0.0, u)
    assert lhs == pytest.approx(rhs, abs=1e-12)


@pytest.mark.parametrize("s, x", [(0.2, -1.0), (0.7, -0.3)])
def test_H_argmax_on_left_branch(s, x):
    e = math.exp(s - 1.0)
    u_bar = -1.0
    ref = ReferencePoint.at(EX31, s, x, u_bar)
    z = -e * x  # -V_x sigma_bar along the trajectory
    grid = EX31.controls.grid(1e-3)
    H = eval_H(EX31, s, x, 0.0, z, grid, e, 0.0, 0.0, ref)
    top = grid[H >= H.max() - 1e-12]
    assert set(np.round(top, 9)) == {-1.0, 2.0}


def test_H_max_at_u_minus_two_for_smooth_example():
    e = model.get_example("ex32")
    grid = EX32.controls.grid(1e-3)
    for s, x in [(0.1, 0.5), (0.5, -1.3), (0.9, 2.0)]:
        ad = e.closed_form.adjoints(s, x, -2.0)
        ref = ReferencePoint.at(EX32, s, x, -2.0)
        y, z = -e.closed_form.V(s, x), -e.closed_form.V_x(s, x) * ref.sigma_bar
        H = eval_H(EX32, s, x, y, z, grid, ad["p"], ad["q"], ad["P"], ref)
        H_bar = eval_H(EX32, s, x, y, z, -2.0, ad["p"], ad["q"], ad["P"], ref)
        assert H_bar >= H.max() - 1e-12


@given(reals, reals, reals, reals, reals, st.sampled_from([-1.0, -0.3, 0.0, 1.0, 1.6, 2.0]), st.sampled_from([-1.0, 2.0]))
def test_H1_routes_agree(x, p, q, P, v, u, u_bar):
    ref = ReferencePoint.at(EX31, 0.3, x, u_bar)
    a = eval_H1(EX31, 0.3, x, u, p, q, P, v, ref, route="G")
    b = eval_H1(EX31, 0.3, x, u, p, q, P, v, ref, route="expanded")
    assert a == pytest.approx(b, abs=1e-12)
    assert a == pytest.approx(eval_G(EX31, 0.3, x, -v, p, P, u) + (q - P * ref.sigma_bar) * EX31.sigma(0.3, x, u), abs=1e-12)


def test_H1_on_ex31_branches():
    V = model.get_example("ex31").closed_form
    for u in (-1.0, -0.4, 0.0, 1.0, 2.0):
        ref = ReferencePoint.at(EX31, 0.5, 0.0, u)
        assert eval_H1(EX31, 0.5, 0.0, u, 1.7, 0.0, 0.0, 0.0, ref) == 0.0
    for s, x in [(0.25, -1.3), (0.5, -0.2)]:
        for u in (-1.0, 2.0):
            ref = ReferencePoint.at(EX31, s, x, u)
            h1 = eval_H1(EX31, s, x, u, math.exp(s - 1), 0.0, 0.0, V.V(s, x), ref)
            assert h1 == pytest.approx(-math.exp(s - 1) * x, abs=1e-12)
        for u in (0.0, 1.0):
            ref = ReferencePoint.at(EX31, s, -x, u)
            h1 = eval_H1(EX31, s, -x, u, math.exp(1 - s), 0.0, 0.0, V.V(s, -x), ref)
            assert h1 == pytest.approx(-math.exp(1 - s) * x, abs=1e-12)


def test_H1_unknown_route():
    with pytest.raises(ValueError):
        eval_H1(EX31, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, ReferencePoint.at(EX31, 0.0, 1.0, 1.0), route="other")


# -- assumptions ------------------------------------------------------------


@pytest.mark.parametrize("ex", ["ex31", "ex32", "ex33"])
def test_builtin_derivatives_match_finite_differences(ex):
    rep = model.check_assumptions(model.builtin_example(ex))
    assert rep.max_mismatch <= 1e-6 and rep.asymmetry <= 1e-12
    assert rep.to_dict()["n_points"] == 1000


def test_quadratic_terminal_differentiates_exactly():
    prob = model.problem_from_expressions("u", "1", "-z", "x^2", [(-1, 1)])
    rep = model.check_assumptions(prob, model.SampleSpec(x_range=(-2.0, 2.0)))
    assert rep.derivative_mismatch["phi_xx"] <= 1e-8


def test_drift_derivative_of_ex31():
    rng = np.random.default_rng(1)
    x, u = rng.uniform(-3, 3, 100), EX31.controls.sample(100, rng)
    np.testing.assert_allclose(EX31.coefficients.b_x(0.0, x, u), 1 + u, atol=1e-8)
    assert model.check_assumptions(EX31).derivative_mismatch["b_x"] <= 1e-8


def test_expression_problem_reproduces_builtin():
    built = model.problem_from_expressions("x*(1+u)", "x*u", "-z*u", "x", [(-1, 0), (1, 2)])
    rng = np.random.default_rng(3)
    t, x, y, z = rng.random(50), rng.uniform(-2, 2, 50), rng.normal(size=50), rng.normal(size=50)
    u = EX31.controls.sample(50, rng)
    for name in ("b", "sigma", "b_x", "sigma_x"):
        np.testing.assert_allclose(getattr(built.coefficients, name)(t, x, u), getattr(EX31.coefficients, name)(t, x, u), atol=1e-14)
    for name in ("f", "f_x", "f_y", "f_z"):
        np.testing.assert_allclose(getattr(built.coefficients, name)(t, x, y, z, u), getattr(EX31.coefficients, name)(t, x, y, z, u), atol=1e-14)
    np.testing.assert_allclose(built.coefficients.D2f(t, x, y, z, u), EX31.coefficients.D2f(t, x, y, z, u), atol=1e-14)


def test_expression_problem_rejects_wrong_arguments():
    with pytest.raises(ValueError, match="phi"):
        model.problem_from_expressions("u", "1", "-z", "x*u", [(-1, 1)])
    with pytest.raises(ValueError, match="b"):
        model.problem_from_expressions("y", "1", "-z", "x", [(-1, 1)])
