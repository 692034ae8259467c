"""Forward Monte Carlo for the controlled state equation.

Every path draws its Brownian increments from its own Philox stream keyed by
``(seed, path index)``, so bundles are reproducible path by path and do not
depend on how the path loop is split across threads.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import expr as _expr
from .model import ControlDomainError, ControlProblem, builtin_example

CHUNK = 2048


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    T: float
    N: int

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("time grid needs N >= 1")
        if not self.T > self.t0:
            raise ValueError("time grid needs T > t0")

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.N

    @property
    def nodes(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.N + 1)

    def index(self, s: float) -> int:
        """Nearest node index to time ``s``."""
        return int(np.clip(round((s - self.t0) / self.dt), 0, self.N))


@dataclass(frozen=True)
class NoiseBundle:
    grid: TimeGrid
    increments: np.ndarray  # (M, N)
    seed: int
    substreams: np.ndarray  # (M,) path ids used as stream keys

    @property
    def M(self) -> int:
        return self.increments.shape[0]


def path_generator(seed: int, path: int) -> np.random.Generator:
    """Counter-based generator owned by a single path."""
    if not 0 <= seed < 2**64:
        raise ValueError("seed must fit in 64 bits")
    return np.random.Generator(np.random.Philox(key=(int(path) << 64) | int(seed)))


def _chunks(M: int):
    return [(a, min(a + CHUNK, M)) for a in range(0, M, CHUNK)]


def _run_chunks(fn, M: int, workers: int):
    jobs = _chunks(M)
    if workers <= 1 or len(jobs) == 1:
        for a, b in jobs:
            fn(a, b)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        list(pool.map(lambda ab: fn(*ab), jobs))


def make_noise(grid: TimeGrid, M: int, seed: int, workers: int = 1) -> NoiseBundle:
    if M < 1:
        raise ValueError("need at least one path")
    out = np.empty((M, grid.N))
    sd = math.sqrt(grid.dt)

    def fill(a, b):
        for m in range(a, b):
            out[m] = path_generator(seed, m).standard_normal(grid.N) * sd

    _run_chunks(fill, M, workers)
    return NoiseBundle(grid, out, int(seed), np.arange(M))


# --------------------------------------------------------------------------
# control policies


@dataclass(frozen=True)
class Constant:
    value: float

    def __call__(self, t, x, path=None, step=None):
        return np.full(np.shape(x), float(self.value))

    @property
    def name(self) -> str:
        return f"constant({self.value:g})"


@dataclass(frozen=True)
class Feedback:
    func: Callable
    label: str = "feedback"

    def __call__(self, t, x, path=None, step=None):
        return np.asarray(self.func(t, x), dtype=float) + np.zeros(np.shape(x))

    @property
    def name(self) -> str:
        return self.label


@dataclass(frozen=True)
class Tabulated:
    values: np.ndarray  # (M, N)

    def __call__(self, t, x, path=None, step=None):
        return self.values[path, step]

    @property
    def name(self) -> str:
        return "tabulated"


def feedback_from_expression(source: str) -> Feedback:
    tree = _expr.parse(source)
    extra = _expr.free_variables(tree) - {"t", "x"}
    if extra:
        raise ValueError(f"feedback policy may only depend on t and x, got {sorted(extra)}")
    return Feedback(lambda t, x: _expr.evaluate(tree, {"t": t, "x": x}), source)


def policy_from_spec(spec) -> object:
    """Build a policy from ``{"constant": c}`` or ``{"feedback": "th(x)"}``."""
    if isinstance(spec, (Constant, Feedback, Tabulated)):
        return spec
    if not isinstance(spec, dict) or len(spec) != 1:
        raise ValueError(f"policy spec must be a single-key mapping, got {spec!r}")
    (kind, arg), = spec.items()
    if kind == "constant":
        return Constant(float(arg))
    if kind == "feedback":
        return feedback_from_expression(str(arg))
    raise ValueError(f"unknown policy kind {kind!r}")


# --------------------------------------------------------------------------
# forward simulation


@dataclass(frozen=True)
class PathBundle:
    grid: TimeGrid
    noise: NoiseBundle
    x0: float
    X: np.ndarray  # (M, N+1)
    u: np.ndarray  # (M, N+1); the last column repeats the policy at T
    failed: np.ndarray  # (M,) non-finite state flag
    sign_flips: int  # paths whose state changed sign relative to x0
    policy_name: str = ""

    @property
    def M(self) -> int:
        return self.X.shape[0]

    @property
    def dW(self) -> np.ndarray:
        return self.noise.increments

    @property
    def ok(self) -> np.ndarray:
        return ~self.failed


def simulate_forward(
    problem: ControlProblem,
    policy,
    grid: TimeGrid,
    noise: NoiseBundle,
    x0: float,
    workers: int = 1,
) -> PathBundle:
    """Euler–Maruyama ``X_{i+1} = X_i + b dt + sigma dW`` under ``policy``."""
    if problem.n != 1:
        raise ValueError("forward simulation supports scalar states only")
    if noise.grid != grid:
        raise ValueError("noise bundle was generated on a different grid")
    policy = policy_from_spec(policy)
    M, N, dt = noise.M, grid.N, grid.dt
    t = grid.nodes
    X = np.empty((M, N + 1))
    U = np.empty((M, N + 1))
    X[:, 0] = x0
    controls = problem.controls

    def run(a, b):
        rows = np.arange(a, b)
        for i in range(N + 1):
            xi = X[a:b, i]
            ui = np.asarray(policy(t[i], xi, rows, min(i, N - 1)), dtype=float)
            finite = np.isfinite(xi)
            if not np.all(controls.contains(ui[finite])):
                bad = ui[finite][~controls.contains(ui[finite])]
                raise ControlDomainError(f"policy {getattr(policy, 'name', policy)} emitted {bad[:3]} outside {controls}")
            U[a:b, i] = ui
            if i == N:
                break
            with np.errstate(over="ignore", invalid="ignore"):
                X[a:b, i + 1] = xi + problem.b(t[i], xi, ui) * dt + problem.sigma(t[i], xi, ui) * noise.increments[a:b, i]

    _run_chunks(run, M, workers)
    failed = ~np.all(np.isfinite(X), axis=1)
    s0 = np.sign(x0)
    flips = int(np.sum(np.any(np.sign(X[~failed]) != s0, axis=1))) if s0 != 0 else int(np.sum(np.any(X[~failed] != 0, axis=1)))
    return PathBundle(grid, noise, float(x0), X, U, failed, flips, getattr(policy, "name", ""))


def write_paths_csv(bundle: PathBundle, path, paths: Optional[Sequence[int]] = None) -> None:
    """Columns ``path, step, t, X, u, dW`` (``dW`` empty at the terminal node)."""
    paths = range(bundle.M) if paths is None else paths
    t = bundle.grid.nodes
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "step", "t", "X", "u", "dW"])
        for m in paths:
            for i in range(bundle.grid.N + 1):
                dw = "%.17g" % bundle.dW[m, i] if i < bundle.grid.N else ""
                w.writerow([m, i, "%.17g" % t[i], "%.17g" % bundle.X[m, i], "%.17g" % bundle.u[m, i], dw])


# --------------------------------------------------------------------------
# solver self-test against the geometric Brownian closed form


@dataclass
class StrongErrorTable:
    u: float
    steps: list
    rms: list
    stderr: list
    order: float

    def rows(self):
        return list(zip(self.steps, self.rms, self.stderr))


def strong_error(u: float, x0: float = 1.0, T: float = 1.0, ladder=(50, 100, 200, 400), M: int = 4000, seed: int = 0) -> StrongErrorTable:
    """RMS terminal error of Euler–Maruyama on the first built-in example.

    All rungs reuse the finest increments aggregated block-wise, so the
    comparison is path-by-path against ``x0 exp{(1+u-u^2/2)T + u W_T}``.
    """
    problem = builtin_example("ex31")
    problem.controls.require(u)
    finest = max(ladder)
    if any(finest % n for n in ladder):
        raise ValueError("every rung must divide the finest step count")
    noise = make_noise(TimeGrid(0.0, T, finest), M, seed)
    W_T = noise.increments.sum(axis=1)
    exact = x0 * np.exp((1.0 + u - 0.5 * u * u) * T + u * W_T)
    rms, se = [], []
    for n in ladder:
        grid = TimeGrid(0.0, T, n)
        dW = noise.increments.reshape(M, n, finest // n).sum(axis=2)
        coarse = NoiseBundle(grid, dW, noise.seed, noise.substreams)
        X = simulate_forward(problem, Constant(u), grid, coarse, x0).X[:, -1]
        e2 = (X - exact) ** 2
        r = math.sqrt(e2.mean())
        rms.append(r)
        se.append(float(e2.std(ddof=1) / math.sqrt(M) / (2 * r)) if r > 0 else 0.0)
    dts = np.array([T / n for n in ladder])
    order = float(np.polyfit(np.log(dts), np.log(rms), 1)[0])
    return StrongErrorTable(float(u), list(ladder), rms, se, order)
