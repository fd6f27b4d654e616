"""Compiled vs pure-Python QP kernel on the online problems of the bundled System 1 scenario.

Usage::

    python3 benchmarks/bench_kernel.py [--horizons 5 10 15] [--points 200]

Each kernel solves the same condensed OCT QPs at random feasible states;
the clarabel path is timed alongside for reference.
"""
import argparse
import time

import numpy as np

from octmpc import qp
from octmpc.config import load_bundled
from octmpc.controllers import OctController
from octmpc.design import design_offline


def time_kernel(ctrl, points, kernel, repeats=3):
    ctrl.kernel = kernel
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        for x in points:
            ctrl.solve(x)
        best = min(best, time.perf_counter() - t0)
    return best / len(points)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--horizons", type=int, nargs="+", default=[5, 10, 15])
    p.add_argument("--points", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    cfg = load_bundled("system1")
    rng = np.random.default_rng(args.seed)
    print(f"compiled kernel available: {qp.solve_qp_compiled is not None}")
    print(f"{'N':>3} {'python [us]':>12} {'compiled [us]':>14} {'clarabel [us]':>14} {'speedup':>8}")
    for N in args.horizons:
        design = design_offline(cfg.system, cfg.weights, N, with_fpd=False)
        ctrl = OctController.from_design(design, cfg.system, cfg.weights)
        cand = rng.uniform(-25, 25, size=(20 * args.points, 2))
        pts = [x for x in cand if ctrl.solve(x).feasible][:args.points]
        t_py = time_kernel(ctrl, pts, "python")
        t_c = time_kernel(ctrl, pts, "compiled") if qp.solve_qp_compiled is not None else float("nan")
        t0 = time.perf_counter()
        for x in pts:
            ctrl.solve(x, backend="conic")
        t_cl = (time.perf_counter() - t0) / len(pts)
        print(f"{N:3d} {1e6 * t_py:12.1f} {1e6 * t_c:14.1f} {1e6 * t_cl:14.1f} {t_py / t_c:8.1f}")


if __name__ == "__main__":
    main()
