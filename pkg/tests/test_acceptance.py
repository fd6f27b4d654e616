"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

The heavy criteria (grid sweeps, Monte-Carlo cost comparison) take a few
minutes on one core; run this file alone with ``pytest tests/test_acceptance.py -v -s``.
"""
import itertools

import numpy as np
import pytest

from octmpc.config import bundled_scenarios, load_bundled
from octmpc.controllers import make_controllers
from octmpc.design import lyapunov_residual
from octmpc.prediction import DisturbanceFeedback, phi_blocks
from octmpc.simulation import ClosedLoopInfeasible, compare_costs, estimate_roa, simulate, timing_report

from conftest import ACCEPTANCE_LINES, design_for

pytestmark = pytest.mark.slow


def verdict(num: int, ok: bool, detail: str):
    line = f"criterion {num:02d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[num] = line
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def sys1():
    cfg = load_bundled("system1")
    assert cfg.grid.size == 2500 and cfg.grid.lower == (-25, -25) and cfg.grid.upper == (25, 25)
    return cfg


@pytest.fixture(scope="module")
def ctrls10(sys1):
    design = design_for(sys1, 10)
    return make_controllers(design, sys1.system, sys1.weights, ["tmpc", "oct", "fpd"])


@pytest.fixture(scope="module")
def roa10(sys1, ctrls10):
    return estimate_roa(ctrls10, sys1.grid, order=("tmpc", "oct", "fpd"))


def brute_force_tightening(system, feedback, N):
    """Worst case of every tightened row by enumerating all vertex sequences of W.

    Errors are propagated step by step under the disturbance feedback; this
    shares nothing with the dual-LP route apart from the system data.
    """
    V = system.W.vertices()
    Bw = system.Bw
    t = np.zeros((N, system.nc))
    for i in range(1, N):
        best = np.full(system.nc, -np.inf)
        for seq in itertools.product(range(len(V)), repeat=i):
            w = V[list(seq)]
            e = np.zeros(system.nx)
            for k in range(i):
                du = sum((feedback.block(k - j) @ Bw @ w[j] for j in range(k)), np.zeros(system.nu))
                e = system.A @ e + system.B @ du + Bw @ w[k]
            du = sum((feedback.block(i - j) @ Bw @ w[j] for j in range(i)), np.zeros(system.nu))
            best = np.maximum(best, system.F @ e + system.G @ du)
        t[i] = best
    return t


# 1 ------------------------------------------------------------------------------------

def test_criterion_01_roa_nesting(roa10):
    c = roa10.counts
    f = roa10.flags
    tmpc_not_oct = int(np.sum(f["tmpc"] & ~f["oct"]))
    oct_not_fpd = int(np.sum(f["oct"] & ~f["fpd"]))
    ok = (c["tmpc"] <= c["oct"] <= c["fpd"] and c["oct"] - c["tmpc"] >= 1 and tmpc_not_oct == 0
          and roa10.nesting_ok)
    verdict(1, ok, f"counts tmpc={c['tmpc']} oct={c['oct']} fpd={c['fpd']} of 2500; tmpc-only={tmpc_not_oct}, "
                   f"oct-not-fpd={oct_not_fpd} (margin-checked violations {len(roa10.nesting_violations)})")


# 2 ------------------------------------------------------------------------------------

def test_criterion_02_long_horizon_superset(sys1):
    design = design_for(sys1, 15)
    ctrls = make_controllers(design, sys1.system, sys1.weights, ["tmpc", "oct"])
    rep = estimate_roa(ctrls, sys1.grid, order=("tmpc", "oct"))
    f = rep.flags
    tmpc_only = int(np.sum(f["tmpc"] & ~f["oct"]))
    ok = tmpc_only == 0 and rep.nesting_ok
    verdict(2, ok, f"N=15 counts tmpc={rep.counts['tmpc']} oct={rep.counts['oct']}; tmpc-only points={tmpc_only}; "
                   f"norm t oct={design.tightening.norm:.4f} tmpc={design.tmpc.norm:.4f}")


# 3 ------------------------------------------------------------------------------------

def test_criterion_03_problem_size_parity(sys1):
    s = sys1.system
    nu, nx, nc, nd = s.nu, s.nx, s.nc, s.D.shape[0]
    rows = {}
    ok = True
    for N in (5, 10, 15):
        design = design_for(sys1, N)
        ctrls = make_controllers(design, s, sys1.weights, ["tmpc", "oct", "fpd"])
        co, ct, cf = ctrls["oct"].counts, ctrls["tmpc"].counts, ctrls["fpd"].counts
        nY = design.terminal_fpd.n_rows
        formula = N * (nu + nx) + nu * nx * N * (N - 1) // 2 + nd * (nc * N * (N - 1) // 2 + nY * N)
        ok &= co == ct and cf["variables"] == formula and cf["variables"] > co["variables"]
        rows[N] = (co["variables"], co["constraints"], cf["variables"], cf["constraints"])
    v = {N: rows[N][2] for N in rows}
    # the count is an exact quadratic in N: constant second difference 25 * (nu*nx + nd*nc)
    second = v[15] - 2 * v[10] + v[5]
    ok &= second == 25 * (nu * nx + nd * nc) and second > 0
    inc_ratio = (v[15] - v[10]) / (v[10] - v[5])
    verdict(3, ok, "oct=tmpc (vars, cons) at N=5,10,15: "
                   + ", ".join(f"N={N}:({r[0]},{r[1]})" for N, r in rows.items())
                   + f"; fpd vars {v[5]}, {v[10]}, {v[15]}; second difference {second}, increment ratio "
                     f"{inc_ratio:.3f}")


# 4 ------------------------------------------------------------------------------------

def test_criterion_04_timing_ratio(ctrls10, roa10):
    common = roa10.points[roa10.flags["oct"] & roa10.flags["fpd"]]
    rep = timing_report({"oct": ctrls10["oct"], "fpd": ctrls10["fpd"]}, common, backend="conic")
    ratio = rep["fpd"]["mean"] / rep["oct"]["mean"]
    verdict(4, ratio >= 3.0 and rep["oct"]["n"] >= 30,
            f"mean fpd/oct solve time {ratio:.2f} over {rep['oct']['n']} points "
            f"(oct {rep['oct']['mean'] * 1e3:.3f} ms, fpd {rep['fpd']['mean'] * 1e3:.3f} ms, same conic solver)")


# 5 ------------------------------------------------------------------------------------

def test_criterion_05_cost_parity(ctrls10, roa10):
    both = roa10.points[roa10.flags["tmpc"] & roa10.flags["oct"]]
    cmp_ = compare_costs(ctrls10["tmpc"], ctrls10["oct"], both, runs=50, steps=60, seed=2024)
    r = cmp_.ratios[cmp_.both]
    frac = cmp_.fraction_within(0.97, 1.03)
    verdict(5, frac >= 0.95 and r.size > 0,
            f"{100 * frac:.1f}% of {r.size} points within [0.97, 1.03]; ratio min {r.min():.4f} "
            f"median {np.median(r):.4f} max {r.max():.4f}; within 0.5%: {100 * cmp_.fraction_within(0.995, 1.005):.1f}%")


# 6 ------------------------------------------------------------------------------------

def test_criterion_06_recursive_feasibility(sys1, ctrls10, roa10):
    rng = np.random.default_rng(6)
    starts = roa10.points[roa10.flags["oct"]]
    modes = ("uniform", "vertex-cycle", "random-vertex")
    steps_total, infeasible, violations, worst = 0, 0, 0, -np.inf
    ss = np.random.SeedSequence(6).spawn(100)
    for run in range(100):
        x0 = starts[rng.integers(len(starts))]
        try:
            tr = simulate(ctrls10["oct"], x0, 100, disturbance=modes[run % 3], seed=ss[run])
        except ClosedLoopInfeasible as exc:
            infeasible += 1
            tr = exc.trace
        steps_total += tr.steps
        v = tr.max_violation(sys1.system)
        worst = max(worst, v)
        violations += int(np.sum((tr.states[:tr.steps] @ sys1.system.F.T + tr.inputs @ sys1.system.G.T
                                  - sys1.system.b).max(axis=1) > 1e-6)) if tr.steps else 0
    ok = steps_total >= 10_000 and infeasible == 0 and violations == 0
    verdict(6, ok, f"{steps_total} steps over 100 runs (uniform, vertex-cycle, random-vertex): "
                   f"{infeasible} infeasible solves, {violations} violating steps, largest constraint excess {worst:.3e}")


# 7 ------------------------------------------------------------------------------------

def test_criterion_07_shift_candidate(sys1, ctrls10):
    ctrl, s = ctrls10["oct"], sys1.system
    rng = np.random.default_rng(7)
    Wv = s.W.vertices()
    states, worst = 0, -np.inf
    while states < 200:
        x = rng.uniform(-25, 25, size=2)
        d = ctrl.solve(x)
        if not d.feasible:
            continue
        states += 1
        for w in Wv:
            inputs, plan = ctrl.shift_candidate(d, w)
            worst = max(worst, ctrl.constraint_violation(d.states[1] + s.Bw @ w, inputs, plan))
    verdict(7, worst <= 1e-6, f"{states} feasible states x {len(Wv)} vertices: worst constraint excess {worst:.3e}")


# 8 ------------------------------------------------------------------------------------

def test_criterion_08_tightening_recursion():
    parts, worst_all = [], 0.0
    for name in bundled_scenarios():
        cfg = load_bundled(name)
        design = design_for(cfg, cfg.N)
        s = cfg.system
        Phi = phi_blocks(design.feedback, s, design.N)
        V = s.W.vertices()
        worst = 0.0
        for i in range(design.N - 1):
            # one-step term: max over a single w in W of (F Phi_i + G M_(i+1)) B_w w, by vertex enumeration
            row = (s.F @ Phi[i] + s.G @ design.feedback.block(i + 1)) @ s.Bw
            term = np.max(V @ row.T, axis=0)
            worst = max(worst, float(np.abs(design.tightening.increments[i] - term).max()))
        worst_all = max(worst_all, worst)
        parts.append(f"{name} {worst:.1e}")
    verdict(8, worst_all <= 1e-6, "max |t_(i+1) - t_i - one-step support|: " + ", ".join(parts))


# 9 ------------------------------------------------------------------------------------

def test_criterion_09_oracle_equivalence():
    lines, worst = [], 0.0
    small = [n for n in bundled_scenarios() if load_bundled(n).system.nx <= 2]
    for name in small:
        cfg = load_bundled(name)
        for N in (2, 3, 4):
            design = design_for(cfg, N)
            for label, fb, tv in (("oct", design.feedback, design.tightening),
                                  ("tmpc", None, design.tmpc)):
                if fb is None:
                    fb = DisturbanceFeedback.from_state_feedback(design.terminal.K_f, cfg.system, N)
                brute = brute_force_tightening(cfg.system, fb, N)
                dual = tv.stacked_certificate(cfg.system.d).T @ np.tile(cfg.system.d, N - 1)
                err = max(float(np.abs(brute - tv.t).max()), float(np.abs(brute.ravel() - dual).max()))
                worst = max(worst, err)
        lines.append(name)
    verdict(9, worst <= 1e-6, f"scenarios {', '.join(lines)} at N=2,3,4 (oct and tmpc feedback): "
                              f"max |dual - brute force| = {worst:.2e}")


# 10 -----------------------------------------------------------------------------------

def test_criterion_10_terminal_ingredients():
    parts, ok_all = [], True
    for name in bundled_scenarios():
        cfg = load_bundled(name)
        design = design_for(cfg, cfg.N)
        s, term, fb, tv, N = cfg.system, design.terminal, design.feedback, design.tightening, design.N
        lyap = lyapunov_residual(s, cfg.weights, term.K_f, term.P)
        Phi = phi_blocks(fb, s, N)
        row_F = (s.F @ Phi[N - 1] + s.G @ fb.block(N)) @ s.Bw
        row_Y = term.Y @ Phi[N] @ s.Bw
        cons = max(float(np.abs(tv.lambda1 @ s.D - row_F).max()),
                   float(np.abs(tv.lambda2 @ s.D - row_Y).max()),
                   float((tv.lambda1 @ s.d + term.c_F - (s.b - tv.t[-1])).max()),
                   float((tv.lambda2 @ s.d + term.c_Y - term.z).max()),
                   float(-min(tv.lambda1.min(), tv.lambda2.min())))
        rng = np.random.default_rng(10)
        xs = term.X_T.sample(1000, rng)
        Wv = s.W.vertices()
        lhs_a = xs @ (s.F + s.G @ term.K_f).T
        lhs_b = xs @ (term.Y @ (s.A + s.B @ term.K_f)).T
        sampled = -np.inf
        for w in Wv:
            sampled = max(sampled, float((lhs_a + row_F @ w - (s.b - tv.t[-1])).max()),
                          float((lhs_b + row_Y @ w - term.z).max()))
        ok = lyap <= 1e-6 and cons <= 1e-6 and sampled <= 1e-6
        ok_all &= ok
        parts.append(f"{name}: lyapunov {lyap:.1e}, certificate {cons:.1e}, sampled excess {sampled:.1e} "
                     f"({len(xs)}x{len(Wv)})")
    verdict(10, ok_all, "; ".join(parts))


# 11 -----------------------------------------------------------------------------------

def test_criterion_11_optimality_dominance():
    parts, ok = [], True
    for name in bundled_scenarios():
        cfg = load_bundled(name)
        design = design_for(cfg, cfg.N)
        a, b = design.tightening.norm, design.tmpc.norm
        ok &= a <= b + 1e-6
        parts.append(f"{name} {a:.4f} <= {b:.4f}")
    verdict(11, ok, "norm t oct vs tmpc: " + ", ".join(parts))


# 12 -----------------------------------------------------------------------------------

def test_criterion_12_undisturbed_convergence(ctrls10, roa10):
    starts = roa10.points[roa10.flags["oct"]]
    worst_norm, worst_rise, slow = 0.0, -np.inf, 0
    for x0 in starts:
        tr = simulate(ctrls10["oct"], x0, 200, disturbance="zero")
        norms = np.linalg.norm(tr.states, axis=1)
        final = float(norms[-1])
        worst_norm = max(worst_norm, final)
        slow += int(final >= 1e-4)
        if len(tr.objectives) > 1:
            worst_rise = max(worst_rise, float(np.diff(tr.objectives).max()))
    ok = slow == 0 and worst_rise <= 1e-6
    verdict(12, ok, f"{len(starts)} feasible grid starts: largest |x_200| {worst_norm:.2e}, "
                    f"largest cost increase {worst_rise:.2e}")
