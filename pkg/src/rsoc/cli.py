"""Command-line front end.

    rsoc example list
    rsoc example describe ex32
    rsoc solve run.yaml [--seed N] [--out DIR]
    rsoc verify run.yaml [--suite thm31,mp] [--seed N] [--out DIR]

Exit codes: 0 success, 1 a verification check failed, 2 usage or
configuration error, 3 a numerical guard fired.

A run is described by one YAML file; see :class:`RunConfig` for the keys.
Only the seed and the output directory can be overridden, by flag or (seed)
by the ``RSOC_SEED`` environment variable, in the order flag > environment >
file.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime
import json
import os
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import __version__, bsde, hjb, sim
from . import verify as vf
from .model import ControlDomainError, example_ids, get_example, problem_from_expressions

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_GUARD = 0, 1, 2, 3

CHECKS = ("thm31", "thm32", "thm33", "smooth", "mp", "dpp-to-mp", "strict-gap", "screen")
DEFAULT_SUITE = ("thm31", "thm32", "thm33", "smooth", "mp", "dpp-to-mp", "strict-gap")


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class MonteCarloConfig:
    M: int = 20000
    N: Optional[int] = None  # None: the example's recommended step count, else 200
    seed: int = 0
    workers: int = 1
    witnesses: int = vf.N_WITNESSES


@dataclass(frozen=True)
class ScreenConfig:
    step: float = 0.05
    M: int = 5000
    N: int = 100
    feedback: tuple = ()


@dataclass(frozen=True)
class RunConfig:
    """Schema of a run file.

    ``problem`` is a built-in id or a mapping with expression strings
    ``b, sigma, f, phi``, a list ``controls`` of ``[lo, hi]`` intervals and
    optional ``T, t0, label``.  ``policy`` is ``optimal``, ``suboptimal`` or a
    mapping ``{constant: c}`` / ``{feedback: "th(x)"}``.  ``value`` picks the
    value function used by the checks: ``closed-form``, ``grid`` or ``auto``.
    """

    problem: object
    x0: Optional[float] = None
    policy: object = "optimal"
    value: str = "auto"
    z_mode: str = "regression"
    grid: dict = field(default_factory=dict)
    monte_carlo: MonteCarloConfig = MonteCarloConfig()
    basis: Optional[dict] = None
    tolerances: vf.Tolerances = vf.Tolerances()
    checks: tuple = ()
    screen: ScreenConfig = ScreenConfig()
    solve: tuple = ("hjb", "paths", "adjoints")
    value_csv_stride: int = 25
    output: str = "rsoc-out"


_PROBLEM_KEYS = {"b", "sigma", "f", "phi", "controls", "T", "t0", "label"}
_BASIS_KEYS = {f.name for f in dataclasses.fields(bsde.RegressionBasis)}
_GRID_KEYS = {f.name for f in dataclasses.fields(hjb.GridSpec)}


def _grid_spec(grid, x_lo, x_hi):
    """``GridSpec`` from the ``grid`` section, the domain defaulting to ``[x_lo, x_hi]``."""
    lo = grid.get("x_lo", x_lo if "x_hi" not in grid else grid["x_hi"] - 1.0)
    hi = grid.get("x_hi", x_hi if "x_lo" not in grid else grid["x_lo"] + 1.0)
    try:
        return hjb.GridSpec(**({"x_lo": lo, "x_hi": hi} | grid))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"grid: {exc}") from exc


def _section(cls, raw, name):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"'{name}' must be a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(raw) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{name}': {', '.join(sorted(unknown))}")
    out = {}
    for k, v in raw.items():
        default = getattr(cls(), k)
        if isinstance(default, bool):
            out[k] = bool(v)
        elif isinstance(default, int) and not isinstance(v, bool) and isinstance(v, (int, float)):
            out[k] = int(v)
        elif isinstance(default, float):
            if not isinstance(v, (int, float)) or isinstance(v, bool):
                raise ConfigError(f"'{name}.{k}' must be a number")
            out[k] = float(v)
        elif isinstance(default, tuple):
            out[k] = tuple(v if isinstance(v, (list, tuple)) else [v])
        elif default is None and v is not None:
            if not isinstance(v, int) or isinstance(v, bool):
                raise ConfigError(f"'{name}.{k}' must be an integer")
            out[k] = v
        else:
            out[k] = v
    return cls(**out)


def _check_keys(raw, allowed, name):
    if not isinstance(raw, dict):
        raise ConfigError(f"'{name}' must be a mapping")
    unknown = set(raw) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{name}': {', '.join(sorted(unknown))}")


def parse_config(raw: dict) -> RunConfig:
    """Validate a decoded run file; raises :class:`ConfigError` before any computation."""
    if not isinstance(raw, dict):
        raise ConfigError("run file must contain a mapping")
    top = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(raw) - top
    if unknown:
        raise ConfigError(f"unknown key(s): {', '.join(sorted(unknown))}")
    if "problem" not in raw:
        raise ConfigError("missing required key 'problem'")
    problem = raw["problem"]
    if isinstance(problem, str):
        if problem not in example_ids():
            raise ConfigError(f"unknown example {problem!r}; known: {', '.join(example_ids())}")
    elif isinstance(problem, dict):
        _check_keys(problem, _PROBLEM_KEYS, "problem")
        missing = {"b", "sigma", "f", "phi", "controls"} - set(problem)
        if missing:
            raise ConfigError(f"custom problem needs {', '.join(sorted(missing))}")
    else:
        raise ConfigError("'problem' must be an example id or a mapping")
    grid = raw.get("grid") or {}
    _check_keys(grid, _GRID_KEYS, "grid")
    _grid_spec(grid, -3.0, 3.0)
    basis = raw.get("basis")
    if basis is not None:
        _check_keys(basis, _BASIS_KEYS, "basis")
    policy = raw.get("policy", "optimal")
    if not (policy in ("optimal", "suboptimal") or (isinstance(policy, dict) and len(policy) == 1 and set(policy) <= {"constant", "feedback"})):
        raise ConfigError("'policy' must be optimal, suboptimal, {constant: c} or {feedback: expr}")
    if isinstance(problem, dict) and policy in ("optimal", "suboptimal"):
        raise ConfigError("custom problems need an explicit policy mapping")
    value = raw.get("value", "auto")
    if value not in ("auto", "closed-form", "grid"):
        raise ConfigError("'value' must be auto, closed-form or grid")
    z_mode = raw.get("z_mode", "regression")
    if z_mode not in ("regression", "identity"):
        raise ConfigError("'z_mode' must be regression or identity")
    checks = tuple(raw.get("checks") or ())
    bad = set(checks) - set(CHECKS)
    if bad:
        raise ConfigError(f"unknown check(s): {', '.join(sorted(bad))}")
    stages = tuple(raw.get("solve") or ("hjb", "paths", "adjoints"))
    if set(stages) - {"hjb", "paths", "adjoints"}:
        raise ConfigError("'solve' stages are hjb, paths, adjoints")
    try:
        return RunConfig(
            problem=problem,
            x0=None if raw.get("x0") is None else float(raw["x0"]),
            policy=policy,
            value=value,
            z_mode=z_mode,
            grid=dict(grid),
            monte_carlo=_section(MonteCarloConfig, raw.get("monte_carlo"), "monte_carlo"),
            basis=None if basis is None else dict(basis),
            tolerances=_section(vf.Tolerances, raw.get("tolerances"), "tolerances"),
            checks=checks,
            screen=_section(ScreenConfig, raw.get("screen"), "screen"),
            solve=stages,
            value_csv_stride=int(raw.get("value_csv_stride", 25)),
            output=str(raw.get("output", "rsoc-out")),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML in {path}: {exc}") from exc
    return parse_config(raw)


def effective_seed(cfg: RunConfig, flag: Optional[int]) -> int:
    if flag is not None:
        return int(flag)
    env = os.environ.get("RSOC_SEED")
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"RSOC_SEED must be an integer, got {env!r}") from exc
    return cfg.monte_carlo.seed


# --------------------------------------------------------------------------
# run assembly


@dataclass
class Run:
    cfg: RunConfig
    problem: object
    example: object
    x0: float
    policy: object
    basis: bsde.RegressionBasis
    grid_spec: hjb.GridSpec
    seed: int
    N: int


def assemble(cfg: RunConfig, seed: int) -> Run:
    if isinstance(cfg.problem, str):
        example = get_example(cfg.problem)
        problem = example.problem
        x0 = example.default_x0 if cfg.x0 is None else cfg.x0
        if cfg.policy == "optimal":
            policy = example.optimal_policy(x0)
        elif cfg.policy == "suboptimal":
            if example.suboptimal_policy is None:
                raise ConfigError(f"{example.id} has no registered suboptimal policy")
            policy = example.suboptimal_policy
        else:
            policy = cfg.policy
        basis = bsde.basis_for(example.basis) if cfg.basis is None else bsde.RegressionBasis(**cfg.basis)
        x_lo, x_hi = example.hjb_domain
        N = cfg.monte_carlo.N or example.mc_steps
    else:
        example = None
        spec = dict(cfg.problem)
        problem = problem_from_expressions(
            spec["b"], spec["sigma"], spec["f"], spec["phi"], spec["controls"],
            T=float(spec.get("T", 1.0)), t0=float(spec.get("t0", 0.0)), label=str(spec.get("label", "custom")),
        )
        x0 = 0.0 if cfg.x0 is None else cfg.x0
        policy = cfg.policy
        basis = bsde.RegressionBasis(**(cfg.basis or {}))
        x_lo, x_hi = -3.0, 3.0
        N = cfg.monte_carlo.N or 200
    grid_spec = _grid_spec(cfg.grid, x_lo, x_hi)
    return Run(cfg, problem, example, float(x0), sim.policy_from_spec(policy), basis, grid_spec, seed, int(N))


def _simulate(run: Run) -> sim.PathBundle:
    mc = run.cfg.monte_carlo
    grid = sim.TimeGrid(run.problem.t0, run.problem.T, run.N)
    noise = sim.make_noise(grid, mc.M, run.seed, mc.workers)
    return sim.simulate_forward(run.problem, run.policy, grid, noise, run.x0, mc.workers)


def _solve_value(run: Run) -> hjb.ValueGrid:
    closed = run.example.closed_form.V if run.example is not None else None
    return hjb.solve_hjb(run.problem, run.grid_spec, closed_form=closed)


def _value_for_checks(run: Run):
    use_closed = run.cfg.value == "closed-form" or (run.cfg.value == "auto" and run.example is not None)
    if use_closed:
        if run.example is None:
            raise ConfigError("no closed-form value function for a custom problem")
        return run.example.closed_form
    return _solve_value(run)


def _metadata(run: Run, extra: dict) -> dict:
    return {
        "rsoc_version": __version__,
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "problem": run.problem.label,
        "x0": run.x0,
        "policy": getattr(run.policy, "name", str(run.policy)),
        "seed": run.seed,
        "monte_carlo": dataclasses.asdict(run.cfg.monte_carlo) | {"N": run.N, "seed": run.seed},
        "basis": dataclasses.asdict(run.basis),
        "grid": dataclasses.asdict(run.grid_spec),
    } | extra


def _write_curve(path: Path, xs, ys) -> None:
    """Two whitespace-separated columns, one curve per file."""
    with open(path, "w") as fh:
        for a, b in zip(np.ravel(xs), np.ravel(ys)):
            fh.write(f"{a:.17g} {b:.17g}\n")


# --------------------------------------------------------------------------
# commands


def cmd_example(args) -> int:
    if args.action == "list":
        for i in example_ids():
            ex = get_example(i)
            print(f"{i}  {ex.closed_form.description}")
        return EXIT_OK
    if args.id is None:
        print("usage: rsoc example describe ID", file=sys.stderr)
        return EXIT_USAGE
    try:
        ex = get_example(args.id)
    except KeyError as exc:
        print(f"error: {exc.args[0]}", file=sys.stderr)
        return EXIT_USAGE
    print(f"id: {ex.id}")
    for k, v in ex.formulas.items():
        print(f"{k}: {v}")
    print(f"T: {ex.problem.T:g}")
    print(f"default x0: {ex.default_x0:g}")
    if ex.closed_form.adjoints is not None:
        print(f"closed-form adjoints: {', '.join(ex.closed_form.adjoints(0.0, 0.0, ex.problem.controls.intervals[0][0]))} ({ex.closed_form.adjoint_validity})")
    if ex.notes:
        print(f"notes: {ex.notes}")
    return EXIT_OK


def cmd_solve(cfg: RunConfig, seed: int, out: Path) -> int:
    run = assemble(cfg, seed)
    out.mkdir(parents=True, exist_ok=True)
    plots = out / "plots"
    plots.mkdir(exist_ok=True)
    meta: dict = {"status": "ok", "artifacts": []}
    try:
        if "hjb" in cfg.solve:
            grid = _solve_value(run)
            hjb.write_value_csv(grid, out / "value.csv", cfg.value_csv_stride)
            meta["artifacts"].append("value.csv")
            meta["hjb"] = grid.metadata()
            for s in (grid.t[0], grid.t[len(grid.t) // 2]):
                j = int(np.argmin(np.abs(grid.t - s)))
                name = f"value_t{grid.t[j]:.3f}.dat"
                _write_curve(plots / name, grid.x, grid.v[j])
                meta["artifacts"].append(f"plots/{name}")
        if "paths" in cfg.solve or "adjoints" in cfg.solve:
            paths = _simulate(run)
            witnesses = vf.witness_paths(paths, cfg.monte_carlo.witnesses)
            sim.write_paths_csv(paths, out / "paths.csv", witnesses)
            meta["artifacts"].append("paths.csv")
            meta["witness_paths"] = witnesses.tolist()
            meta["failed_paths"] = int(paths.failed.sum())
            if "adjoints" in cfg.solve:
                bundle = bsde.solve_all(run.problem, paths, run.basis)
                bsde.write_cost_csv(bundle.cost, out / "cost.csv", witnesses)
                bsde.write_adjoint_csv(bundle, out / "adjoints.csv", witnesses)
                meta["artifacts"] += ["cost.csv", "adjoints.csv"]
                meta["cost"] = {"J": -bundle.cost.Y0, "residual_scale": bundle.cost.residual_scale}
                t = paths.grid.nodes
                for m in witnesses[:4]:
                    _write_curve(plots / f"p_path{m}.dat", t, bundle.first.p[m])
                    _write_curve(plots / f"P_path{m}.dat", t, bundle.second.P[m])
    except hjb.UnstableSchemeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(f"stability bound: dt <= {exc.bound:.6e}", file=sys.stderr)
        meta.update(status="failed", error=str(exc), stability_bound=exc.bound)
        _dump(out / "metadata.json", _metadata(run, meta))
        return EXIT_GUARD
    except (hjb.SchemeBlowupError, bsde.InvariantViolation, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        meta.update(status="failed", error=str(exc))
        _dump(out / "metadata.json", _metadata(run, meta))
        return EXIT_GUARD
    _dump(out / "metadata.json", _metadata(run, meta))
    print(f"wrote {len(meta['artifacts'])} artifacts to {out}")
    return EXIT_OK


def _dump(path, obj):
    with open(path, "w") as fh:
        json.dump(vf._jsonable(obj), fh, indent=2)


def run_checks(run: Run, suite, out: Optional[Path] = None) -> list:
    """Run the selected checks and return their reports."""
    cfg, tol = run.cfg, run.cfg.tolerances
    problem, ex = run.problem, run.example
    closed = ex.closed_form if ex is not None else None
    V = _value_for_checks(run)
    paths = _simulate(run)
    needs_fbsde = "thm32" in suite
    bundle = bsde.solve_all(problem, paths, run.basis, fbsde=needs_fbsde)
    first, second, cost = bundle.first, bundle.second, bundle.cost
    witnesses = vf.witness_paths(paths, cfg.monte_carlo.witnesses)
    common = {"witnesses": witnesses}
    reports = []
    for name in suite:
        if name == "thm31":
            reports.append(vf.check_theorem_31(problem, paths, first, second, V, tol.jet, **common))
        elif name == "thm32":
            reports.append(vf.check_theorem_32(problem, paths, bundle.fbsde, first, V, tol.transform, **common))
        elif name == "thm33":
            reports.append(vf.check_theorem_33(problem, paths, first, second, V, tol.time_rel, tol.time_abs, **common))
        elif name == "smooth":
            if closed is None:
                reports.append(_not_applicable(name, "needs a closed-form value function"))
            else:
                reports.append(vf.check_smooth_case(problem, paths, first, second, closed, tol.smooth, tol.smooth_q, **common))
        elif name == "mp":
            reports.append(vf.check_maximum_principle(problem, paths, first, second, cost, tol.hamiltonian, cfg.z_mode, closed, **common))
        elif name == "dpp-to-mp":
            if closed is None:
                reports.append(_not_applicable(name, "needs a closed-form value function"))
            else:
                reports.append(vf.derive_mp_from_dpp(problem, closed, paths, first, second, cost, tol.dpp, **common))
        elif name == "strict-gap":
            if ex is None or ex.gap_source is None:
                reports.append(_not_applicable(name, "no registered second-order gap source"))
            else:
                reports.append(vf.strict_gap_check(problem, paths, cost, second, closed, ex.gap_source, run.basis, tol.gap_oracle, **common))
        elif name == "screen":
            reports.append(_screen_report(run, V, closed))
    if out is not None:
        rep_dir = out / "reports"
        rep_dir.mkdir(parents=True, exist_ok=True)
        for r in reports:
            r.write_json(rep_dir / f"{r.check}.json")
            r.write_csv(rep_dir / f"{r.check}.csv")
    return reports


def _not_applicable(name, why) -> vf.RelationReport:
    return vf.RelationReport(name, [], {}, summary={"reason": why})


def _screen_report(run: Run, V, closed) -> vf.RelationReport:
    sc = run.cfg.screen
    family = vf.constant_family(run.problem, sc.step) + [{"feedback": f} for f in sc.feedback]
    smooth_value = closed if closed is not None and bool(closed.smooth(run.problem.t0, run.x0)) else None
    cands = vf.screen_candidates(run.problem, V, family, run.x0, sc.M, sc.N, run.seed, run.basis, run.cfg.tolerances.jet, smooth_value)
    samples = [vf._judge(run.problem.t0, k, f"survivor {c.name}", 1.0, 1.0, 0.0, 0.0) for k, c in enumerate(cands.survivors)]
    if not samples:
        samples = [vf._judge(run.problem.t0, -1, "no survivors", 0.0, 1.0, 1.0, 0.0)]
    return vf.RelationReport("screen", samples, {"jet": run.cfg.tolerances.jet}, vf._provenance(V), cands.to_dict())


def _summary_table(reports) -> str:
    # the worst sample is the one closest to (or furthest past) its own tolerance
    lines = [f"{'check':<15} {'status':<15} {'samples':>7} {'max deviation':>14} {'min margin':>11}  worst (s, path, quantity)"]
    for r in reports:
        w = r.worst()
        where = "-" if w is None else f"({w.s:.4g}, {w.path}, {w.quantity})"
        margin = "-" if w is None else f"{w.tol - w.deviation:.4g}"
        lines.append(f"{r.check:<15} {r.status:<15} {len(r.samples):>7} {r.max_violation:>14.4g} {margin:>11}  {where}")
    return "\n".join(lines)


def cmd_verify(cfg: RunConfig, seed: int, out: Path, suite) -> int:
    run = assemble(cfg, seed)
    suite = tuple(suite or cfg.checks or DEFAULT_SUITE)
    out.mkdir(parents=True, exist_ok=True)
    try:
        reports = run_checks(run, suite, out)
    except (hjb.UnstableSchemeError, hjb.SchemeBlowupError, bsde.InvariantViolation) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_GUARD
    print(_summary_table(reports))
    failed = [r for r in reports if not r.passed]
    _dump(out / "metadata.json", _metadata(run, {"suite": list(suite), "status": {r.check: r.status for r in reports}}))
    if failed:
        worst = max((r.worst() for r in failed if r.worst() is not None), key=lambda s: s.deviation - s.tol, default=None)
        if worst is not None:
            print(f"FAIL: worst violation {worst.deviation:.4g} > tol {worst.tol:.3g} in {worst.quantity} at s={worst.s:.4g}, path {worst.path}")
        return EXIT_FAIL
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rsoc", description="Recursive stochastic control: solvers and adjoint/value-function checks.")
    ap.add_argument("--version", action="version", version=f"rsoc {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    ex = sub.add_parser("example", help="list or describe built-in examples")
    ex.add_argument("action", choices=("list", "describe"))
    ex.add_argument("id", nargs="?")
    for name, helptext in (("solve", "run the HJB, forward and backward solvers"), ("verify", "run the verification suite")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("config", help="YAML run file")
        p.add_argument("--seed", type=int, default=None, help="override the Monte Carlo seed")
        p.add_argument("--out", default=None, help="override the output directory")
        if name == "verify":
            p.add_argument("--suite", default=None, help=f"comma-separated subset of {','.join(CHECKS)}")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    if args.command == "example":
        return cmd_example(args)
    try:
        cfg = load_config(args.config)
        seed = effective_seed(cfg, args.seed)
        out = Path(args.out or cfg.output)
        suite = None
        if args.command == "verify" and args.suite:
            suite = [s.strip() for s in args.suite.split(",") if s.strip()]
            bad = set(suite) - set(CHECKS)
            if bad:
                raise ConfigError(f"unknown check(s): {', '.join(sorted(bad))}")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", bsde.BasisDegradationWarning)
            if args.command == "solve":
                return cmd_solve(cfg, seed, out)
            return cmd_verify(cfg, seed, out, suite)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ControlDomainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
