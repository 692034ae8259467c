"""Shared fixtures: value grids and Monte Carlo trajectories with every adjoint solved."""

from __future__ import annotations

import gc
import sys
import warnings
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import pytest

from rsoc import bsde, hjb, model, sim

sys.path.insert(0, str(Path(__file__).parent))

ACCEPTANCE_M = 20_000


@dataclass
class Run:
    example: model.ExampleEntry
    paths: sim.PathBundle
    adj: bsde.AdjointBundle
    basis: bsde.RegressionBasis

    @property
    def problem(self):
        return self.example.problem

    @property
    def V(self):
        return self.example.closed_form


def trajectory_run(ex, x0, policy, M=ACCEPTANCE_M, N=None, seed=0, fbsde=True) -> Run:
    e = model.get_example(ex)
    grid = sim.TimeGrid(e.problem.t0, e.problem.T, N or e.mc_steps)
    paths = sim.simulate_forward(e.problem, policy, grid, sim.make_noise(grid, M, seed), x0)
    basis = bsde.basis_for(e.basis)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", bsde.BasisDegradationWarning)
        adj = bsde.solve_all(e.problem, paths, basis, fbsde=fbsde)
    return Run(e, paths, adj, basis)


class RunCache:
    """Least-recently-used store of trajectory runs bounded by their array memory.

    A full run at the acceptance sizes holds about a dozen ``M x (N+1)``
    arrays, so only a few fit in memory at once; evicted runs are rebuilt
    on demand from the same seed and come back identical.
    """

    ARRAYS_PER_RUN = 12

    def __init__(self, budget_bytes: int):
        self.budget = budget_bytes
        self.runs: "OrderedDict[str, tuple[Run, int]]" = OrderedDict()

    @classmethod
    def estimate(cls, M: int, N: int) -> int:
        return cls.ARRAYS_PER_RUN * M * (N + 1) * 8

    def get(self, key: str, build: Callable[[], Run], size: int) -> Run:
        if key in self.runs:
            self.runs.move_to_end(key)
            return self.runs[key][0]
        while self.runs and self.used() + size > self.budget:
            self.runs.popitem(last=False)
        gc.collect()
        run = build()
        self.runs[key] = (run, size)
        return run

    def used(self) -> int:
        return sum(size for _, size in self.runs.values())


RUNS = RunCache(3 * 2**30)

# name -> (example, x0, policy, doc)
TRAJECTORIES = {
    "ex31_left": ("ex31", -1.0, {"constant": -1.0}, "ex31 from x = -1 under the optimal u = -1."),
    "ex31_left_u2": ("ex31", -1.0, {"constant": 2.0}, "ex31 from x = -1 under the other optimal constant u = 2."),
    "ex31_kink": ("ex31", 0.0, {"constant": 1.0}, "ex31 started on the kink, where the state never moves."),
    "ex31_suboptimal": ("ex31", -1.0, {"constant": 0.0}, "ex31 from x = -1 under the suboptimal u = 0."),
    "ex32_run": ("ex32", 0.5, {"constant": -2.0}, "ex32 from x = 0.5 under u = -2."),
    "ex33_run": ("ex33", 0.5, {"feedback": "th(x)"}, "ex33 from x = 0.5 under the feedback th(x)."),
}


def _trajectory_fixture(name):
    ex, x0, policy, doc = TRAJECTORIES[name]

    def fixture():
        N = model.get_example(ex).mc_steps
        return RUNS.get(name, lambda: trajectory_run(ex, x0, policy), RunCache.estimate(ACCEPTANCE_M, N))

    fixture.__name__ = name
    fixture.__doc__ = doc
    return pytest.fixture(fixture)


for _name in TRAJECTORIES:
    globals()[_name] = _trajectory_fixture(_name)


@pytest.fixture(scope="session")
def ex31_grid():
    e = model.get_example("ex31")
    return hjb.solve_hjb(e.problem, hjb.GridSpec(x_lo=-3.0, x_hi=3.0, dx=0.005, dt=0.002, control_grid_step=0.01))


@pytest.fixture(scope="session")
def ex32_grid():
    e = model.get_example("ex32")
    lo, hi = e.hjb_domain
    return hjb.solve_hjb(e.problem, hjb.GridSpec(x_lo=lo, x_hi=hi, dx=0.005, dt=0.002, control_grid_step=0.01))


@pytest.fixture(scope="session")
def ex33_grid_coarse():
    e = model.get_example("ex33")
    lo, hi = e.hjb_domain
    return hjb.solve_hjb(e.problem, hjb.GridSpec(x_lo=lo, x_hi=hi, dx=0.02, dt=0.01, control_grid_step=0.02))


def rms(a) -> float:
    a = np.asarray(a, dtype=float)
    return float(np.sqrt(np.mean(a * a)))


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion that ran."""
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
