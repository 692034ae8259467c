"""Strong convergence of the Euler-Maruyama simulator on the kinked example.

    python scripts/strong_error.py --u 2 --u -1 --M 8000
"""

import argparse

from rsoc import sim


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--u", type=float, action="append", help="constant control (repeatable); default -1 and 2")
    ap.add_argument("--x0", type=float, default=1.0)
    ap.add_argument("--M", type=int, default=4000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--ladder", type=int, nargs="+", default=[50, 100, 200, 400, 800])
    args = ap.parse_args()
    for u in args.u or [-1.0, 2.0]:
        tab = sim.strong_error(u, args.x0, ladder=tuple(args.ladder), M=args.M, seed=args.seed)
        print(f"u = {u:g}, x0 = {args.x0:g}, M = {args.M}")
        print(f"{'N':>6} {'rms error':>12} {'stderr':>10}")
        for n, e, s in tab.rows():
            print(f"{n:>6} {e:>12.5g} {s:>10.2g}")
        print(f"fitted order {tab.order:.3f}\n")


if __name__ == "__main__":
    main()
