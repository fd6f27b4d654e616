"""Closed-loop experiments: simulation, region-of-attraction grids, cost and timing comparisons.

All randomness flows from ``numpy.random.SeedSequence``; per-point and per-run
streams are spawned deterministically, so results do not depend on the number
of worker processes.
"""
from __future__ import annotations

import csv
import json
import logging
import os
import subprocess
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .controllers import INFEASIBLE, OPTIMAL, ControlDecision, SolverFailure
from .model import CostWeights, LinearSystem

logger = logging.getLogger(__name__)

SUMMARY_SCHEMA_VERSION = 1
DISTURBANCE_MODES = ("uniform", "zero", "vertex-cycle", "random-vertex", "sequence")


class ClosedLoopInfeasible(RuntimeError):
    """The online problem became infeasible mid-run; ``trace`` holds the steps taken so far."""

    def __init__(self, message, trace: "ClosedLoopTrace"):
        super().__init__(message)
        self.trace = trace


# -- disturbances ------------------------------------------------------------------

def disturbance_sequence(system: LinearSystem, steps: int, mode: str = "uniform", seed=None,
                         sequence=None) -> np.ndarray:
    """Disturbance sequence of shape ``(steps, nw)``.

    ``uniform`` samples uniformly over ``W``; ``vertex-cycle`` walks through
    the vertices of ``W`` in order; ``random-vertex`` draws vertices at random;
    ``sequence`` repeats (or truncates) an explicit array.
    """
    nw = system.nw
    if mode == "zero":
        return np.zeros((steps, nw))
    if mode == "sequence":
        if sequence is None:
            raise ValueError("mode 'sequence' needs an explicit sequence")
        seq = np.asarray(sequence, dtype=float).reshape(-1, nw)
        reps = -(-steps // seq.shape[0])
        return np.tile(seq, (reps, 1))[:steps]
    rng = np.random.default_rng(seed)
    if mode == "uniform":
        if steps == 0:
            return np.zeros((0, nw))
        return system.W.sample(steps, rng)
    if mode in ("vertex-cycle", "random-vertex"):
        V = system.W.vertices()
        if mode == "vertex-cycle":
            offset = int(rng.integers(V.shape[0])) if seed is not None else 0
            return V[(np.arange(steps) + offset) % V.shape[0]]
        return V[rng.integers(V.shape[0], size=steps)]
    raise ValueError(f"unknown disturbance mode {mode!r}; expected one of {DISTURBANCE_MODES}")


# -- closed loop -------------------------------------------------------------------

@dataclass(eq=False)
class ClosedLoopTrace:
    """Closed-loop run ``x_0 .. x_K`` under inputs ``u_0 .. u_{K-1}``."""

    states: np.ndarray
    inputs: np.ndarray
    disturbances: np.ndarray
    stage_costs: np.ndarray
    solve_times: np.ndarray
    statuses: list
    objectives: np.ndarray

    @property
    def steps(self) -> int:
        return self.inputs.shape[0]

    @property
    def total_cost(self) -> float:
        return float(self.stage_costs.sum())

    def dynamics_residual(self, system: LinearSystem) -> float:
        if self.steps == 0:
            return 0.0
        pred = self.states[:-1] @ system.A.T + self.inputs @ system.B.T + self.disturbances @ system.Bw.T
        return float(np.abs(pred - self.states[1:self.steps + 1]).max())

    def max_violation(self, system: LinearSystem) -> float:
        """Largest ``F x_k + G u_k - b`` over the run (non-positive when satisfied)."""
        if self.steps == 0:
            return -np.inf
        lhs = self.states[:self.steps] @ system.F.T + self.inputs @ system.G.T
        return float((lhs - system.b).max())

    def tail_bound(self, fraction: float = 0.5) -> float:
        """``max ||x_k||`` over the last ``fraction`` of the run; a lim-sup surrogate."""
        start = int(self.states.shape[0] * (1 - fraction))
        return float(np.linalg.norm(self.states[start:], axis=1).max())

    def write_csv(self, path) -> None:
        nx, nu, nw = self.states.shape[1], self.inputs.shape[1], self.disturbances.shape[1]
        header = (["k"] + [f"x{i}" for i in range(nx)] + [f"u{i}" for i in range(nu)]
                  + [f"w{i}" for i in range(nw)] + ["stage_cost", "objective", "solve_time", "status"])
        with open(path, "w", newline="", encoding="utf-8") as fh:
            out = csv.writer(fh)
            out.writerow(header)
            for k in range(self.states.shape[0]):
                if k < self.steps:
                    out.writerow([k, *self.states[k], *self.inputs[k], *self.disturbances[k], self.stage_costs[k],
                                  self.objectives[k], self.solve_times[k], self.statuses[k]])
                else:
                    out.writerow([k, *self.states[k]] + [""] * (nu + nw + 4))


def simulate(controller, x0, steps: int, weights: CostWeights | None = None, disturbance: str = "uniform",
             seed=None, sequence=None, backend: str = "kernel") -> ClosedLoopTrace:
    """Run the receding-horizon loop for ``steps`` steps from ``x0``.

    Raises
    ------
    ClosedLoopInfeasible
        If any online solve is infeasible; the partial trace is attached.
    """
    system: LinearSystem = controller.system
    weights = weights or controller.weights
    W = disturbance_sequence(system, steps, disturbance, seed, sequence)
    x = np.asarray(x0, dtype=float).copy()
    states, inputs, costs, times, statuses, objs = [x.copy()], [], [], [], [], []

    def trace(n):
        return ClosedLoopTrace(np.array(states), np.array(inputs).reshape(-1, system.nu), W[:n],
                               np.array(costs), np.array(times), statuses, np.array(objs))

    for k in range(steps):
        decision: ControlDecision = controller.step(x, backend=backend)
        if not decision.feasible:
            statuses.append(decision.status)
            raise ClosedLoopInfeasible(f"{controller.name}: online problem {decision.status} at step {k}",
                                       trace(k))
        u = decision.u
        inputs.append(u)
        costs.append(weights.stage_cost(x, u))
        times.append(decision.solve_time)
        statuses.append(decision.status)
        objs.append(decision.objective)
        x = system.step(x, u, W[k])
        states.append(x.copy())
    return trace(steps)


# -- grids and region of attraction ----------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    """Uniform grid over ``axes`` of the state; other coordinates are held at ``base``.

    ``lower``, ``upper`` and ``counts`` have one entry per gridded axis.
    """

    lower: tuple
    upper: tuple
    counts: tuple
    axes: tuple | None = None
    nx: int | None = None
    base: tuple | None = None

    def points(self) -> np.ndarray:
        axes_vals = [np.linspace(lo, hi, int(n)) for lo, hi, n in zip(self.lower, self.upper, self.counts)]
        mesh = np.meshgrid(*axes_vals, indexing="ij")
        sub = np.stack([m.ravel() for m in mesh], axis=1)
        nx = self.nx or len(self.counts)
        axes = self.axes if self.axes is not None else tuple(range(len(self.counts)))
        pts = np.tile(np.zeros(nx) if self.base is None else np.asarray(self.base, dtype=float), (sub.shape[0], 1))
        pts[:, list(axes)] = sub
        return pts

    @property
    def size(self) -> int:
        return int(np.prod(self.counts))

    def to_dict(self) -> dict:
        return {"lower": list(self.lower), "upper": list(self.upper), "counts": list(self.counts),
                "axes": None if self.axes is None else list(self.axes), "nx": self.nx,
                "base": None if self.base is None else list(self.base)}


@dataclass(eq=False)
class RoaReport:
    grid: GridSpec | None
    points: np.ndarray
    flags: dict
    statuses: dict
    order: tuple
    nesting_violations: list = field(default_factory=list)

    @property
    def counts(self) -> dict:
        return {k: int(v.sum()) for k, v in self.flags.items()}

    @property
    def percentages(self) -> dict:
        """Feasible counts relative to the FPD count if present, else to the grid size."""
        ref = self.counts.get("fpd") or len(self.points)
        return {k: 100.0 * c / ref for k, c in self.counts.items()}

    @property
    def nesting_ok(self) -> bool:
        return not self.nesting_violations

    def write_csv(self, path) -> None:
        names = list(self.flags)
        nx = self.points.shape[1]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            out = csv.writer(fh)
            out.writerow([f"x{i}" for i in range(nx)] + [f"feasible_{n}" for n in names])
            for j, p in enumerate(self.points):
                out.writerow([*p] + [int(self.flags[n][j]) for n in names])

    def summary(self) -> dict:
        return {"grid": None if self.grid is None else self.grid.to_dict(), "n_points": int(len(self.points)),
                "counts": self.counts, "percentages": self.percentages, "order": list(self.order),
                "nesting_ok": self.nesting_ok, "nesting_violations": self.nesting_violations[:50]}


def _status_at(controller, x, margin=0.0) -> str:
    try:
        return controller.solve(x, margin=margin).status
    except SolverFailure as exc:
        logger.warning("%s", exc)
        return "numerical-failure"


def _roa_chunk(args):
    controllers, points = args
    return {name: [_status_at(c, x) for x in points] for name, c in controllers.items()}


def _map_chunks(fn, items, jobs: int, payload):
    """Apply ``fn((payload, chunk))`` over contiguous chunks, serially or in a process pool."""
    items = list(items)
    if jobs <= 1 or len(items) < 2:
        return [fn((payload, items))]
    n = min(jobs, len(items))
    bounds = np.linspace(0, len(items), n + 1).astype(int)
    chunks = [items[bounds[i]:bounds[i + 1]] for i in range(n)]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, [(payload, c) for c in chunks]))


def estimate_roa(controllers: dict, grid: GridSpec | np.ndarray, order=("tmpc", "oct", "fpd"),
                 margin: float = 1e-6, jobs: int = 1) -> RoaReport:
    """Feasibility of every controller's online problem at every grid point.

    ``order`` lists controllers from smallest to largest expected region;
    consecutive pairs present in ``controllers`` are checked for nesting. A
    point violates nesting only if the smaller problem stays feasible with all
    inequalities tightened by ``margin`` while the larger one is infeasible.
    """
    points = grid.points() if isinstance(grid, GridSpec) else np.asarray(grid, dtype=float)
    parts = _map_chunks(_roa_chunk, points, jobs, controllers)
    statuses = {name: sum((p[name] for p in parts), []) for name in controllers}
    flags = {name: np.array([s == OPTIMAL for s in st], dtype=bool) for name, st in statuses.items()}
    chain = [n for n in order if n in controllers]
    violations = []
    for small, large in zip(chain, chain[1:]):
        for j in np.nonzero(flags[small] & ~flags[large])[0]:
            if _status_at(controllers[small], points[j], margin) == OPTIMAL:
                violations.append({"point": points[j].tolist(), "smaller": small, "larger": large})
    return RoaReport(grid if isinstance(grid, GridSpec) else None, points, flags, statuses, tuple(chain), violations)


# -- cost comparison ------------------------------------------------------------------

@dataclass(eq=False)
class CostComparison:
    points: np.ndarray
    names: tuple
    mean_costs: np.ndarray  # (n_points, 2), NaN where a controller is infeasible
    feasible: np.ndarray  # (n_points, 2)
    runs: int
    steps: int

    @property
    def both(self) -> np.ndarray:
        return self.feasible.all(axis=1)

    @property
    def ratios(self) -> np.ndarray:
        """``mean_cost[first] / mean_cost[second]`` at mutually feasible points, NaN elsewhere."""
        with np.errstate(invalid="ignore", divide="ignore"):
            r = self.mean_costs[:, 0] / self.mean_costs[:, 1]
        r[~self.both] = np.nan
        # both costs zero (start at the origin without disturbance)
        r[self.both & (self.mean_costs[:, 1] == 0) & (self.mean_costs[:, 0] == 0)] = 1.0
        return r

    def fraction_within(self, lo: float, hi: float) -> float:
        r = self.ratios[self.both]
        return float(np.mean((r >= lo) & (r <= hi))) if r.size else float("nan")

    def write_csv(self, path) -> None:
        nx = self.points.shape[1]
        a, b = self.names
        with open(path, "w", newline="", encoding="utf-8") as fh:
            out = csv.writer(fh)
            out.writerow([f"x{i}" for i in range(nx)]
                         + ["ratio", "n_runs", f"mean_cost_{a}", f"mean_cost_{b}", "feasible_set"])
            for j, p in enumerate(self.points):
                fa, fb = self.feasible[j]
                tag = "both" if fa and fb else f"only_{a}" if fa else f"only_{b}" if fb else "neither"
                out.writerow([*p, self.ratios[j], self.runs if fa and fb else 0, *self.mean_costs[j], tag])


def _point_seeds(seed, n_points: int):
    return np.random.SeedSequence(seed).spawn(n_points)


def _cost_chunk(args):
    (ctrl_a, ctrl_b, runs, steps, mode), items = args
    out = []
    for x, ss in items:
        fa, fb = ctrl_a.solve(x).feasible, ctrl_b.solve(x).feasible
        costs = [np.nan, np.nan]
        if fa and fb:
            run_seeds = ss.spawn(runs)
            totals = np.zeros((runs, 2))
            for r, rs in enumerate(run_seeds):
                W = disturbance_sequence(ctrl_a.system, steps, mode, rs)
                for c, ctrl in enumerate((ctrl_a, ctrl_b)):
                    totals[r, c] = simulate(ctrl, x, steps, disturbance="sequence", sequence=W).total_cost
            costs = list(totals.mean(axis=0))
        out.append((fa, fb, costs))
    return out


def compare_costs(ctrl_a, ctrl_b, points, runs: int = 50, steps: int = 60, seed=0, disturbance: str = "uniform",
                  jobs: int = 1) -> CostComparison:
    """Average closed-loop cost of two controllers with common random disturbances.

    Only points feasible for both controllers are simulated; the others are
    flagged so that one-sided feasibility can be reported separately.
    """
    points = np.asarray(points, dtype=float)
    items = list(zip(points, _point_seeds(seed, len(points))))
    parts = _map_chunks(_cost_chunk, items, jobs, (ctrl_a, ctrl_b, runs, steps, disturbance))
    rows = [r for p in parts for r in p]
    feas = np.array([[fa, fb] for fa, fb, _ in rows], dtype=bool).reshape(-1, 2)
    costs = np.array([c for _, _, c in rows], dtype=float).reshape(-1, 2)
    return CostComparison(points, (ctrl_a.name, ctrl_b.name), costs, feas, runs, steps)


# -- timing ----------------------------------------------------------------------------

def timing_report(controllers: dict, points, backend: str = "conic", repeats: int = 1) -> dict:
    """Solve-time statistics over ``points`` where every controller is feasible.

    Returns per controller the mean, median and 95th percentile wall time in
    seconds, the number of timed solves and the problem-size counts.
    """
    points = np.asarray(points, dtype=float)
    times = {name: [] for name in controllers}
    used = 0
    for x in points:
        sample = {}
        for name, c in controllers.items():
            best = []
            for _ in range(repeats):
                d = c.solve(x, backend=backend)
                if not d.feasible:
                    break
                best.append(d.solve_time)
            else:
                sample[name] = float(np.mean(best))
                continue
            break
        if len(sample) == len(controllers):
            used += 1
            for name, v in sample.items():
                times[name].append(v)
    out = {}
    for name, c in controllers.items():
        arr = np.asarray(times[name])
        stats = {"n": int(arr.size), "backend": backend}
        if arr.size:
            stats.update(mean=float(arr.mean()), median=float(np.median(arr)), p95=float(np.percentile(arr, 95)))
        else:
            stats.update(mean=float("nan"), median=float("nan"), p95=float("nan"))
        stats.update(c.counts)
        out[name] = stats
    out["_points_used"] = used
    return out


def write_timing_csv(report: dict, path) -> None:
    cols = ["controller", "n", "mean", "median", "p95", "variables", "equalities", "inequalities",
            "constraints", "sign_bounds", "backend"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(cols)
        for name, st in report.items():
            if name.startswith("_"):
                continue
            out.writerow([name] + [st.get(c) for c in cols[1:]])


# -- summaries ---------------------------------------------------------------------------

def git_revision(path=None) -> str | None:
    try:
        res = subprocess.run(["git", "rev-parse", "HEAD"], cwd=path or os.getcwd(), capture_output=True,
                             text=True, timeout=5, check=False)
    except (OSError, subprocess.SubprocessError):
        return None
    return res.stdout.strip() or None if res.returncode == 0 else None


def write_summary(path, kind: str, payload: dict, config_hash: str | None) -> dict:
    doc = {"schema_version": SUMMARY_SCHEMA_VERSION, "kind": kind, "config_hash": config_hash,
           "git_revision": git_revision(os.path.dirname(os.path.abspath(__file__))), **payload}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, default=_json_default)
    return doc


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


__all__ = [
    "ClosedLoopInfeasible", "ClosedLoopTrace", "CostComparison", "GridSpec", "RoaReport", "compare_costs",
    "disturbance_sequence", "estimate_roa", "simulate", "timing_report", "write_summary", "write_timing_csv",
    "INFEASIBLE",
]
