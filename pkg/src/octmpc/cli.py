"""``octmpc`` command line: design, simulate, roa, bench.

Exit codes are a stable contract:

====  ==========================================================
0     success
2     configuration error (schema, missing file, artifact mismatch)
3     infeasibility (offline design, or an online solve mid-run)
4     property violation (feasible-set nesting, constraint violation)
5     solver failure
====  ==========================================================
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import __version__
from .config import ConfigError, ScenarioConfig, load_config
from .controllers import SolverFailure, make_controllers
from .design import DesignError, DesignInfeasibleError, OfflineDesign, design_offline
from .simulation import (ClosedLoopInfeasible, compare_costs, estimate_roa, simulate, timing_report,
                         write_summary, write_timing_csv)

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_PROPERTY, EXIT_SOLVER = 0, 2, 3, 4, 5
VIOLATION_TOL = 1e-6

logger = logging.getLogger("octmpc")


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _out_dir(args, cfg: ScenarioConfig) -> str:
    out = args.out or cfg.output_dir
    os.makedirs(out, exist_ok=True)
    return out


def _artifact_paths(args, out: str) -> list[str]:
    paths = args.artifact or [os.path.join(out, "design.json")]
    for p in paths:
        if not os.path.exists(p):
            raise CliError(f"design artifact not found: {p} (run 'octmpc design' first)", EXIT_CONFIG)
    return paths


def _load_artifact(path: str, cfg: ScenarioConfig) -> OfflineDesign:
    try:
        design = OfflineDesign.load(path)
    except (DesignError, KeyError, ValueError) as exc:
        raise CliError(f"cannot read design artifact {path}: {exc}", EXIT_CONFIG) from None
    if design.config_hash != cfg.config_hash:
        raise CliError(f"artifact {path} was designed for config hash {design.config_hash}, "
                       f"this config hashes to {cfg.config_hash}", EXIT_CONFIG)
    return design


def _controllers(design, cfg, names=None):
    names = names or cfg.controllers
    if "fpd" in names and design.terminal_fpd is None:
        raise CliError("artifact has no robust invariant terminal set; cannot build the fpd controller",
                       EXIT_CONFIG)
    return make_controllers(design, cfg.system, cfg.weights, names)


# -- subcommands ------------------------------------------------------------------------

def cmd_design(args, cfg: ScenarioConfig) -> int:
    out = _out_dir(args, cfg)
    try:
        design = design_offline(cfg.system, cfg.weights, cfg.N, fallback=cfg.fallback,
                                with_fpd="fpd" in cfg.controllers, config_hash=cfg.config_hash)
    except DesignInfeasibleError as exc:
        raise CliError(f"offline design infeasible: {exc}", EXIT_INFEASIBLE) from None
    path = args.artifact[0] if args.artifact else os.path.join(out, "design.json")
    design.save(path)
    st = design.stats
    print(f"wrote {path}")
    print(f"norm_t_oct   {st['norm_t']:.6f}")
    print(f"norm_t_tmpc  {st['norm_t_tmpc']:.6f}")
    print(f"status       {st['socp']['status']}")
    print(f"terminal_rows {st['terminal_rows']}")
    return EXIT_OK


def cmd_simulate(args, cfg: ScenarioConfig) -> int:
    out = _out_dir(args, cfg)
    design = _load_artifact(_artifact_paths(args, out)[0], cfg)
    ctrls = _controllers(design, cfg)
    mc = cfg.monte_carlo
    seed = args.seed if args.seed is not None else mc["seed"]
    trace_dir = os.path.join(out, "traces")
    os.makedirs(trace_dir, exist_ok=True)
    seeds = np.random.SeedSequence(seed).spawn(len(cfg.initial_states) * mc["runs"])
    runs, violations, worst = [], 0, -np.inf
    code = EXIT_OK
    for name, ctrl in ctrls.items():
        for i, x0 in enumerate(cfg.initial_states):
            if not ctrl.solve(x0).feasible:
                runs.append({"controller": name, "start": i, "status": "start-infeasible"})
                continue
            for r in range(mc["runs"]):
                path = os.path.join(trace_dir, f"{name}_x{i}_run{r}.csv")
                try:
                    tr = simulate(ctrl, x0, mc["steps"], disturbance=mc["disturbance"],
                                  seed=seeds[i * mc["runs"] + r])
                except ClosedLoopInfeasible as exc:
                    exc.trace.write_csv(path)
                    runs.append({"controller": name, "start": i, "run": r, "status": "infeasible", "trace": path})
                    code = EXIT_INFEASIBLE
                    break
                tr.write_csv(path)
                v = tr.max_violation(cfg.system)
                worst = max(worst, v)
                violations += int(v > VIOLATION_TOL)
                runs.append({"controller": name, "start": i, "run": r, "status": "ok", "cost": tr.total_cost,
                             "max_violation": v, "tail_norm": tr.tail_bound(), "trace": path})
            if code == EXIT_INFEASIBLE:
                break
        if code == EXIT_INFEASIBLE:
            break
    if code == EXIT_OK and violations:
        code = EXIT_PROPERTY
    write_summary(os.path.join(out, "simulate_summary.json"), "simulate",
                  {"violation_count": violations, "max_violation": worst, "runs": runs, "seed": seed,
                   "exit_code": code}, cfg.config_hash)
    print(f"runs {sum(r['status'] == 'ok' for r in runs)}  violations {violations}  exit {code}")
    return code


def cmd_roa(args, cfg: ScenarioConfig) -> int:
    out = _out_dir(args, cfg)
    code = EXIT_OK
    for k, path in enumerate(_artifact_paths(args, out)):
        design = _load_artifact(path, cfg)
        ctrls = _controllers(design, cfg)
        report = estimate_roa(ctrls, cfg.grid, jobs=args.jobs)
        suffix = "" if k == 0 else f"_{k}"
        report.write_csv(os.path.join(out, f"roa{suffix}.csv"))
        write_summary(os.path.join(out, f"roa_summary{suffix}.json"), "roa", {"artifact": path, **report.summary()},
                      cfg.config_hash)
        counts = "  ".join(f"{n}={c}" for n, c in report.counts.items())
        print(f"{path}: {counts}  nesting {'ok' if report.nesting_ok else 'VIOLATED'}")
        if not report.nesting_ok:
            code = EXIT_PROPERTY
    return code


def cmd_bench(args, cfg: ScenarioConfig) -> int:
    out = _out_dir(args, cfg)
    design = _load_artifact(_artifact_paths(args, out)[0], cfg)
    ctrls = _controllers(design, cfg)
    mc = cfg.monte_carlo
    seed = args.seed if args.seed is not None else mc["seed"]
    report = estimate_roa(ctrls, cfg.grid, jobs=args.jobs)
    common = report.points[np.all(np.stack(list(report.flags.values())), axis=0)]
    rng = np.random.default_rng(seed)

    def subset(pts, n):
        if n is None or len(pts) <= n:
            return pts
        return pts[np.sort(rng.choice(len(pts), n, replace=False))]

    timing = timing_report(ctrls, subset(common, mc.get("timing_points")))
    write_timing_csv(timing, os.path.join(out, "timing.csv"))
    payload = {"timing": timing, "roa_counts": report.counts}
    if "oct" in ctrls and "tmpc" in ctrls:
        both = report.points[report.flags["oct"] | report.flags["tmpc"]]
        costs = compare_costs(ctrls["tmpc"], ctrls["oct"], subset(both, mc.get("cost_points")), runs=mc["runs"],
                              steps=mc["steps"], seed=seed, disturbance=mc["disturbance"], jobs=args.jobs)
        costs.write_csv(os.path.join(out, "costs.csv"))
        r = costs.ratios[costs.both]
        payload["costs"] = {"n_points": int(costs.both.sum()), "ratio_mean": float(np.mean(r)) if r.size else None,
                            "fraction_within_3pct": costs.fraction_within(0.97, 1.03)}
    if "fpd" in timing and "oct" in timing and timing["oct"]["n"]:
        payload["fpd_over_oct_time"] = timing["fpd"]["mean"] / timing["oct"]["mean"]
    write_summary(os.path.join(out, "bench_summary.json"), "bench", payload, cfg.config_hash)
    for name, st in timing.items():
        if not name.startswith("_"):
            print(f"{name:8s} n={st['n']:5d} mean={st['mean']:.3e}s vars={st['variables']} cons={st['constraints']}")
    return EXIT_OK


COMMANDS = {"design": cmd_design, "simulate": cmd_simulate, "roa": cmd_roa, "bench": cmd_bench}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="octmpc", description="Robust MPC with optimized constraint tightening.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="scenario file (JSON or TOML)")
    p.add_argument("--artifact", action="append", help="design artifact path; repeatable for roa")
    p.add_argument("--out", help="output directory (default: the config's output_dir)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for grid sweeps")
    p.add_argument("--seed", type=int, help="override the Monte-Carlo seed")
    p.add_argument("--profile", choices=("ci", "full"), help="apply a named profile from the config")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.profile)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except SolverFailure as exc:
        print(f"solver failure: {exc} {exc.diagnostics}", file=sys.stderr)
        return EXIT_SOLVER
    except DesignError as exc:
        print(f"design failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
