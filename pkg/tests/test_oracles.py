"""The reference values themselves, checked against arbitrary precision and symbolic algebra."""

import mpmath as mp
import numpy as np
import pytest

import oracles

mp.mp.dps = 30


@pytest.mark.parametrize(
    "frozen, exact",
    [
        (oracles.E_HALF, mp.e**0.5),
        (oracles.E_MHALF, mp.e**-0.5),
        (oracles.E_M1, mp.e**-1),
        (oracles.E_1, mp.e),
        (oracles.LNCH_07, mp.log(mp.cosh(mp.mpf("0.7")))),
        (oracles.TH_07, mp.tanh(mp.mpf("0.7"))),
        (oracles.SECH2_07, mp.sech(mp.mpf("0.7")) ** 2),
    ],
)
def test_frozen_constants(frozen, exact):
    assert abs(frozen - float(exact)) <= 1e-11 * max(1.0, abs(float(exact)))


def test_lnch_is_stable_for_large_arguments():
    xs = [-30.0, -0.7, 0.0, 0.7, 5.0, 400.0]
    ref = [float(mp.log(mp.cosh(mp.mpf(x)))) for x in xs]
    np.testing.assert_allclose(oracles.lnch(xs), ref, rtol=1e-14, atol=1e-15)


def test_cost_formula_solves_its_pde():
    residual, terminal = oracles.ex31_cost_pde_residual()
    assert residual == 0 and terminal == 0


def test_value_of_kinked_example():
    assert oracles.ex31_value(0.5, -1.0) == pytest.approx(oracles.E_MHALF, rel=1e-11)
    assert oracles.ex31_value(0.5, 1.0) == pytest.approx(-oracles.E_HALF, rel=1e-11)
    assert oracles.ex31_value(0.3, 0.0) == 0.0


def test_gap_pde_at_origin_is_exact():
    # th(0) = 0 freezes the state at the origin, so the gap is the integrated source
    t, x, g = oracles.ex33_gap_pde(nx=801, nt=200)
    i0 = int(np.argmin(np.abs(x)))
    assert x[i0] == 0.0
    np.testing.assert_allclose(g[:, i0], 1.0 - t, atol=1e-12)


def test_gap_pde_bounds_and_refinement():
    t, x, g = oracles.ex33_gap_pde(nx=801, nt=200)
    assert np.all(g[-1] == 0.0)
    assert np.all(g >= -1e-12) and np.all(g <= (1.0 - t)[:, None] + 1e-12)
    tf, xf, gf = oracles.ex33_gap_pde(nx=1601, nt=400)
    probe = np.array([-1.5, -0.4, 0.3, 1.0, 2.0])
    for s in (0.0, 0.5):
        a = oracles.interp_grid(t, x, g, s, probe)
        b = oracles.interp_grid(tf, xf, gf, s, probe)
        np.testing.assert_allclose(a, b, atol=2e-4)
