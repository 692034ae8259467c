"""Grid refinement study of the implicit HJB solver against the closed-form values.

Halves ``dx`` and ``dt`` together and reports the maximum error over
``|x| <= 2`` and the observed order.

    python scripts/hjb_convergence.py --example ex31 --levels 4
"""

import argparse
import math
import time

import numpy as np

from rsoc import hjb, model


def max_error(grid, V, radius=2.0):
    m = np.abs(grid.x) <= radius
    exact = V(grid.t[:, None], grid.x[None, m])
    return float(np.max(np.abs(grid.v[:, m] - exact)))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--example", default="ex31", choices=model.example_ids())
    ap.add_argument("--dx", type=float, default=0.04)
    ap.add_argument("--dt", type=float, default=0.02)
    ap.add_argument("--control-step", type=float, default=0.01)
    ap.add_argument("--levels", type=int, default=4)
    args = ap.parse_args()

    e = model.get_example(args.example)
    lo, hi = e.hjb_domain
    print(f"{args.example}: domain [{lo:g}, {hi:g}], control step {args.control_step:g}")
    print(f"{'dx':>8} {'dt':>8} {'max err':>11} {'order':>6} {'iters':>6} {'seconds':>8}")
    prev = None
    for k in range(args.levels):
        spec = hjb.GridSpec(x_lo=lo, x_hi=hi, dx=args.dx / 2**k, dt=args.dt / 2**k, control_grid_step=args.control_step)
        start = time.perf_counter()
        grid = hjb.solve_hjb(e.problem, spec)
        err = max_error(grid, e.closed_form.V)
        order = "" if prev is None else f"{math.log2(prev / err):.2f}"
        print(f"{spec.dx:>8.4g} {spec.dt:>8.4g} {err:>11.4e} {order:>6} {grid.policy_iterations:>6} {time.perf_counter() - start:>8.1f}")
        prev = err


if __name__ == "__main__":
    main()
