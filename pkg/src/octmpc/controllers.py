"""Online receding-horizon controllers.

``OctController`` and ``TmpcController`` share one QP shape and differ only in
their tightening vector; ``NominalController`` drops the tightening entirely.
``FpdController`` optimizes a full disturbance-affine input policy online.

Each controller exposes two solve paths:

* ``backend="kernel"`` eliminates the states and solves the dense condensed QP
  with the dual active-set kernel (compiled when available).
* ``backend="conic"`` keeps the states as variables and hands the sparse
  problem to the interior-point backend. Timing comparisons use this path for
  every controller so that all of them pay the same solver overhead.

Infeasibility is reported as data in :class:`ControlDecision`; only numerical
failures raise.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import conic, qp
from .design import OfflineDesign
from .model import CostWeights, LinearSystem
from .polytope import PolytopeH, max_admissible_invariant_set
from .prediction import DisturbanceFeedback, phi_blocks

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
NUMERICAL_FAILURE = "numerical-failure"


class ControllerError(RuntimeError):
    pass


class SolverFailure(ControllerError):
    """The QP solver failed for numerical reasons (not infeasibility)."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True, eq=False)
class ControlDecision:
    """Result of one online solve.

    ``u`` is the first planned input (``None`` unless ``status`` is optimal);
    ``inputs`` has shape ``(N, nu)`` and ``states`` ``(N+1, nx)``.
    """

    status: str
    u: np.ndarray | None = None
    inputs: np.ndarray | None = None
    states: np.ndarray | None = None
    objective: float = float("nan")
    solve_time: float = 0.0
    iterations: int = 0
    info: dict = field(default_factory=dict)

    @property
    def feasible(self) -> bool:
        return self.status == OPTIMAL


@dataclass(frozen=True, eq=False)
class MpcQp:
    """One instantiated online problem in kept-state form.

    ``problem`` carries the conic data; ``objective_offset`` is the constant
    ``x_k^T Q x_k`` that the conic objective omits. ``slices`` maps variable
    groups (``"inputs"``, ``"states"``, ``"gains"``, ``"duals"``) to index ranges.
    """

    problem: conic.ConicProblem
    objective_offset: float
    slices: dict
    N: int
    nx: int
    nu: int

    @property
    def n_variables(self) -> int:
        return self.problem.n_variables

    @property
    def n_equalities(self) -> int:
        return self.problem.A_eq.shape[0]

    @property
    def n_inequalities(self) -> int:
        return self.problem.A_ineq.shape[0]

    @property
    def n_constraints(self) -> int:
        return self.problem.n_constraints

    def counts(self) -> dict:
        return {
            "variables": self.n_variables,
            "equalities": self.n_equalities,
            "inequalities": self.n_inequalities,
            "constraints": self.n_constraints,
            "sign_bounds": len(self.problem.nonneg),
        }

    def split(self, z: np.ndarray):
        inputs = z[self.slices["inputs"]].reshape(self.N, self.nu)
        states = z[self.slices["states"]].reshape(self.N, self.nx)
        return inputs, states


def _block_diag(blocks) -> np.ndarray:
    return sp.block_diag(blocks, format="csc").toarray()


def _dynamics_equalities(system: LinearSystem, N: int):
    """Rows of ``x_{i+1} - A x_i - B u_i = 0`` over ``z = [u_0..u_{N-1}, x_1..x_N]``.

    The right-hand side is ``A x_k`` in the first block and zero elsewhere.
    """
    nx, nu = system.nx, system.nu
    nU = N * nu
    rows = sp.lil_matrix((N * nx, N * (nu + nx)))
    for i in range(N):
        r = slice(i * nx, (i + 1) * nx)
        rows[r, i * nu:(i + 1) * nu] = -system.B
        rows[r, nU + i * nx:nU + (i + 1) * nx] = np.eye(nx)
        if i > 0:
            rows[r, nU + (i - 1) * nx:nU + i * nx] = -system.A
    return rows.tocsc()


# -- quadratic MPC with fixed tightening ------------------------------------------

class TightenedMpc:
    """Receding-horizon QP with stage constraints ``F x_i + G u_i <= b - t_i``.

    Parameters
    ----------
    system, weights
        Plant and stage cost.
    N
        Prediction horizon.
    t
        Tightening, shape ``(N, nc)``; row 0 must be zero for the shift
        candidate to make sense but is applied as given.
    terminal_set
        ``X_T = {x | Y x <= z}``.
    P
        Terminal cost matrix.
    K_f
        Terminal gain used to build shift candidates.
    feedback
        Disturbance feedback whose tightening ``t`` certifies; used only by
        :meth:`shift_candidate`.
    kernel
        ``"auto"``, ``"compiled"`` or ``"python"`` for the condensed path.
    """

    name = "mpc"

    def __init__(self, system: LinearSystem, weights: CostWeights, N: int, t, terminal_set: PolytopeH,
                 P, K_f, feedback: DisturbanceFeedback | None = None, kernel: str | None = None,
                 settings: conic.SolverSettings = conic.DEFAULT_SETTINGS):
        t = np.asarray(t, dtype=float).reshape(N, system.nc)
        if terminal_set.dim != system.nx:
            raise ControllerError(f"terminal set has dimension {terminal_set.dim}, system has {system.nx}")
        self.system, self.weights, self.N = system, weights, N
        self.t = t
        self.terminal_set = terminal_set
        self.P = np.atleast_2d(np.asarray(P, dtype=float))
        self.K_f = np.atleast_2d(np.asarray(K_f, dtype=float))
        self.feedback = feedback if feedback is not None else DisturbanceFeedback.from_state_feedback(self.K_f, system, N)
        self.settings = settings
        self.kernel = kernel
        qp.get_solver(kernel)  # fail early on an unavailable kernel
        self._condense()
        self._template = self._kept_state_template()

    # condensed data -----------------------------------------------------------
    def _condense(self):
        sysm, N = self.system, self.N
        nx, nu = sysm.nx, sysm.nu
        A, B = sysm.A, sysm.B
        # X = Sx x + Su U for X = (x_0 .. x_N)
        Sx = np.zeros(((N + 1) * nx, nx))
        Su = np.zeros(((N + 1) * nx, N * nu))
        Sx[:nx] = np.eye(nx)
        for i in range(1, N + 1):
            Sx[i * nx:(i + 1) * nx] = A @ Sx[(i - 1) * nx:i * nx]
            Su[i * nx:(i + 1) * nx] = A @ Su[(i - 1) * nx:i * nx]
            Su[i * nx:(i + 1) * nx, (i - 1) * nu:i * nu] = B
        Qbar = _block_diag([self.weights.Q] * N + [self.P])
        Rbar = _block_diag([self.weights.R] * N)
        H = 2.0 * (Su.T @ Qbar @ Su + Rbar)
        self._H = 0.5 * (H + H.T)
        self._Fq = 2.0 * Su.T @ Qbar @ Sx
        self._Hx = Sx.T @ Qbar @ Sx
        self._Sx, self._Su = Sx, Su
        self._J0 = qp.inverse_cholesky_factor(self._H)

        F, G, Y = sysm.F, sysm.G, self.terminal_set.A
        stage_C = np.zeros((N * sysm.nc, N * nu))
        stage_S = np.zeros((N * sysm.nc, nx))
        for i in range(N):
            r = slice(i * sysm.nc, (i + 1) * sysm.nc)
            stage_C[r] = F @ Su[i * nx:(i + 1) * nx]
            stage_C[r, i * nu:(i + 1) * nu] += G
            stage_S[r] = F @ Sx[i * nx:(i + 1) * nx]
        C = np.vstack([stage_C, Y @ Su[N * nx:]])
        S = np.vstack([stage_S, Y @ Sx[N * nx:]])
        h0 = np.concatenate([(sysm.b - self.t).ravel(), self.terminal_set.b])
        norms = np.linalg.norm(C, axis=1)
        live = norms > 1e-12
        self._C = C[live] / norms[live, None]
        self._S_live = S[live] / norms[live, None]
        self._h_live = h0[live] / norms[live]
        # rows without decision variables are pure state conditions
        self._S_dead = S[~live]
        self._h_dead = h0[~live]

    # kept-state template --------------------------------------------------------
    def _kept_state_template(self) -> MpcQp:
        sysm, N = self.system, self.N
        nx, nu, nc = sysm.nx, sysm.nu, sysm.nc
        nU = N * nu
        n = N * (nu + nx)
        Pq = sp.block_diag([2.0 * self.weights.R] * N + [2.0 * self.weights.Q] * (N - 1) + [2.0 * self.P], format="csc")
        A_eq = _dynamics_equalities(sysm, N)
        Y = self.terminal_set.A
        A_in = sp.lil_matrix((N * nc + Y.shape[0], n))
        for i in range(N):
            r = slice(i * nc, (i + 1) * nc)
            A_in[r, i * nu:(i + 1) * nu] = sysm.G
            if i > 0:
                A_in[r, nU + (i - 1) * nx:nU + i * nx] = sysm.F
        A_in[N * nc:, nU + (N - 1) * nx:] = Y
        problem = conic.ConicProblem(c=np.zeros(n), P=Pq, A_eq=A_eq, b_eq=np.zeros(N * nx),
                                     A_ineq=A_in.tocsc(), b_ineq=np.zeros(A_in.shape[0]))
        self._b_in0 = np.concatenate([(sysm.b - self.t).ravel(), self.terminal_set.b])
        slices = {"inputs": slice(0, nU), "states": slice(nU, n)}
        return MpcQp(problem, 0.0, slices, N, nx, nu)

    def build_qp(self, x, margin: float = 0.0) -> MpcQp:
        """Kept-state QP for the measured state ``x``."""
        x = np.asarray(x, dtype=float)
        sysm = self.system
        b_eq = np.zeros(self.N * sysm.nx)
        b_eq[:sysm.nx] = sysm.A @ x
        b_in = self._b_in0.copy() - margin
        b_in[:sysm.nc] -= sysm.F @ x
        tpl = self._template
        return MpcQp(tpl.problem.with_rhs(b_eq=b_eq, b_ineq=b_in), float(x @ self.weights.Q @ x),
                     tpl.slices, tpl.N, tpl.nx, tpl.nu)

    @property
    def counts(self) -> dict:
        return self._template.counts()

    # solving ------------------------------------------------------------------------
    def solve(self, x, backend: str = "kernel", margin: float = 0.0) -> ControlDecision:
        """Solve the online problem at ``x``; ``margin`` tightens every inequality further."""
        x = np.asarray(x, dtype=float)
        if backend == "kernel":
            return self._solve_condensed(x, margin)
        if backend == "conic":
            return self._solve_conic(x, margin)
        raise ValueError(f"unknown backend {backend!r}")

    def _solve_condensed(self, x, margin):
        t0 = time.perf_counter()
        if self._h_dead.size and np.any(self._S_dead @ x > self._h_dead - margin):
            return ControlDecision(INFEASIBLE, solve_time=time.perf_counter() - t0)
        q = self._Fq @ x
        h = self._h_live - self._S_live @ x - margin
        status, U, _, iters = qp.get_solver(self.kernel)(self._J0, q, self._C, h)
        elapsed = time.perf_counter() - t0
        if status == qp.INFEASIBLE:
            return ControlDecision(INFEASIBLE, solve_time=elapsed, iterations=iters)
        if status != qp.OPTIMAL:
            raise SolverFailure(f"{self.name}: QP kernel hit the iteration limit at x={x}",
                                {"iterations": iters, "kernel": qp.KERNEL})
        X = self._Sx @ x + self._Su @ U
        obj = float(0.5 * U @ self._H @ U + q @ U + x @ self._Hx @ x)
        nu, nx = self.system.nu, self.system.nx
        return ControlDecision(OPTIMAL, u=U[:nu].copy(), inputs=U.reshape(self.N, nu),
                               states=X.reshape(self.N + 1, nx), objective=obj,
                               solve_time=elapsed, iterations=iters)

    def _solve_conic(self, x, margin):
        t0 = time.perf_counter()
        mpc = self.build_qp(x, margin)
        sol = conic.solve(mpc.problem, self.settings)
        elapsed = time.perf_counter() - t0
        return _decision_from_conic(self.name, mpc, sol, x, elapsed)

    def step(self, x, backend: str = "kernel") -> ControlDecision:
        return self.solve(x, backend)

    def is_feasible(self, x, margin: float = 0.0, backend: str = "kernel") -> bool:
        return self.solve(x, backend, margin).feasible

    # certificates ------------------------------------------------------------------
    def constraint_violation(self, x0, inputs, states) -> float:
        """Largest violation of dynamics, stage and terminal rows by a candidate plan."""
        sysm = self.system
        inputs = np.asarray(inputs, dtype=float).reshape(self.N, sysm.nu)
        states = np.asarray(states, dtype=float).reshape(self.N + 1, sysm.nx)
        worst = float(np.abs(states[0] - x0).max())
        for i in range(self.N):
            worst = max(worst, float(np.abs(states[i + 1] - sysm.A @ states[i] - sysm.B @ inputs[i]).max()))
            worst = max(worst, float(np.max(sysm.F @ states[i] + sysm.G @ inputs[i] - sysm.b + self.t[i])))
        worst = max(worst, float(np.max(self.terminal_set.A @ states[self.N] - self.terminal_set.b)))
        return worst

    def shift_candidate(self, decision: ControlDecision, w):
        """Shifted plan for ``x+ = x_1 + B_w w`` built from the certifying feedback.

        Inputs ``u+_i = u_{i+1} + M_{i+1} B_w w`` with the terminal gain
        appended; states follow ``x+_i = x_{i+1} + Phi_i B_w w``.
        """
        if not decision.feasible:
            raise ControllerError("shift candidate needs an optimal decision")
        sysm, N, fb = self.system, self.N, self.feedback
        dw = sysm.Bw @ np.asarray(w, dtype=float)
        Phi = phi_blocks(fb, sysm, N)
        U, X = decision.inputs, decision.states
        inputs = np.empty_like(U)
        for i in range(N - 1):
            inputs[i] = U[i + 1] + fb.block(i + 1) @ dw
        inputs[N - 1] = self.K_f @ X[N] + fb.block(N) @ dw
        states = np.empty_like(X)
        for i in range(N):
            states[i] = X[i + 1] + Phi[i] @ dw
        states[N] = (sysm.A + sysm.B @ self.K_f) @ X[N] + Phi[N] @ dw
        return inputs, states


def _decision_from_conic(name, mpc: MpcQp, sol: conic.ConicSolution, x, elapsed) -> ControlDecision:
    info = {"solver_time": sol.solve_time, **sol.info}
    if sol.status == conic.INFEASIBLE:
        return ControlDecision(INFEASIBLE, solve_time=elapsed, iterations=sol.iterations, info=info)
    if sol.status != conic.OPTIMAL:
        raise SolverFailure(f"{name}: conic solver returned {sol.status} at x={x}", info)
    inputs, states = mpc.split(sol.x)
    states = np.vstack([x, states])
    return ControlDecision(OPTIMAL, u=inputs[0].copy(), inputs=inputs, states=states,
                           objective=sol.objective + mpc.objective_offset, solve_time=elapsed,
                           iterations=sol.iterations, info=info)


class OctController(TightenedMpc):
    """Optimized constraint tightening: tightening and feedback from the offline program."""

    name = "oct"

    @classmethod
    def from_design(cls, design: OfflineDesign, system: LinearSystem, weights: CostWeights, **kw):
        _check_design(design, system)
        term = design.terminal
        return cls(system, weights, design.N, design.tightening.t, term.X_T, term.P, term.K_f,
                   feedback=design.feedback, **kw)


class TmpcController(TightenedMpc):
    """Tube MPC: tightening generated by the fixed terminal gain."""

    name = "tmpc"

    @classmethod
    def from_design(cls, design: OfflineDesign, system: LinearSystem, weights: CostWeights, **kw):
        _check_design(design, system)
        term = design.terminal
        fb = DisturbanceFeedback.from_state_feedback(term.K_f, system, design.N)
        return cls(system, weights, design.N, design.tmpc.t, term.X_T, term.P, term.K_f, feedback=fb, **kw)


class NominalController(TightenedMpc):
    """Certainty-equivalent MPC: no tightening, nominal maximal admissible terminal set."""

    name = "nominal"

    @classmethod
    def from_design(cls, design: OfflineDesign, system: LinearSystem, weights: CostWeights, **kw):
        _check_design(design, system)
        term = design.terminal
        X_T = nominal_terminal_set(system, term.K_f)
        return cls(system, weights, design.N, np.zeros((design.N, system.nc)), X_T, term.P, term.K_f, **kw)


def nominal_terminal_set(system: LinearSystem, K_f) -> PolytopeH:
    K_f = np.atleast_2d(K_f)
    return max_admissible_invariant_set(system.A + system.B @ K_f, PolytopeH(system.F + system.G @ K_f, system.b))


def _check_design(design: OfflineDesign, system: LinearSystem):
    term = design.terminal
    if term.K_f.shape != (system.nu, system.nx) or design.tightening.t.shape != (design.N, system.nc):
        raise ControllerError("design artifact does not match the system dimensions")


def build_oct_qp(design: OfflineDesign, system: LinearSystem, weights: CostWeights, x) -> MpcQp:
    return OctController.from_design(design, system, weights).build_qp(x)


def build_tmpc_qp(system: LinearSystem, weights: CostWeights, t_tmpc, terminal, x) -> MpcQp:
    """``terminal`` is a :class:`~octmpc.design.TerminalIngredients`."""
    t = getattr(t_tmpc, "t", t_tmpc)
    N = np.asarray(t).reshape(-1, system.nc).shape[0]
    return TmpcController(system, weights, N, t, terminal.X_T, terminal.P, terminal.K_f).build_qp(x)


# -- full disturbance feedback -----------------------------------------------------

class FpdController:
    """Online disturbance-affine feedback ``u_i = u_hat_i + sum_{j<i} M_{i,j} B_w w_j``.

    Every gain entry is a decision variable. Stage rows are robustified over
    the disturbances that reach them through one nonnegative dual block per
    (row, lag) pair; the cost is the disturbance-free nominal cost.
    """

    name = "fpd"

    def __init__(self, system: LinearSystem, weights: CostWeights, N: int, terminal_set: PolytopeH, P,
                 settings: conic.SolverSettings = conic.DEFAULT_SETTINGS, kernel: str | None = None):
        # ``kernel`` is accepted for a uniform constructor; this program always goes to the conic backend
        self.system, self.weights, self.N = system, weights, N
        self.terminal_set = terminal_set
        self.P = np.atleast_2d(np.asarray(P, dtype=float))
        self.settings = settings
        self._template = self._build_template()

    @classmethod
    def from_design(cls, design: OfflineDesign, system: LinearSystem, weights: CostWeights, **kw):
        _check_design(design, system)
        if design.terminal_fpd is None:
            raise ControllerError("design artifact carries no robust invariant terminal set")
        return cls(system, weights, design.N, design.terminal_fpd, design.terminal.P, **kw)

    def _build_template(self) -> MpcQp:
        sysm, N = self.system, self.N
        nx, nu, nw, nc = sysm.nx, sysm.nu, sysm.nw, sysm.nc
        D, d, Bw = sysm.D, sysm.d, sysm.Bw
        nd = D.shape[0]
        Y, z = self.terminal_set.A, self.terminal_set.b
        nY = Y.shape[0]
        nU, nX = N * nu, N * nx

        # variable layout
        gain_index = {}
        pos = nU + nX
        for i in range(1, N):
            for j in range(i):
                gain_index[i, j] = pos
                pos += nu * nx
        gain_end = pos
        n_duals = nd * (nc * N * (N - 1) // 2 + nY * N)
        n = gain_end + n_duals

        Apow = [np.eye(nx)]
        for _ in range(N):
            Apow.append(sysm.A @ Apow[-1])

        eq_rows, eq_cols, eq_vals, eq_rhs = [], [], [], []
        in_rows, in_cols, in_vals = [], [], []
        in_rhs = []
        self._stage0_rows = []
        n_eq = 0
        dual_pos = gain_end
        DT = D.T

        def add_eq_block(r0, cols, block):
            rr, cc = np.nonzero(block)
            eq_rows.extend(r0 + rr)
            eq_cols.extend(np.asarray(cols)[cc])
            eq_vals.extend(block[rr, cc])

        def robust_row(row_x, row_u, stage, rhs):
            """Add one robustified row; ``row_x`` acts on the state at ``stage``, ``row_u`` on its input."""
            nonlocal n_eq, dual_pos
            r_in = len(in_rhs)
            # nominal part
            if row_u is not None:
                for a in range(nu):
                    if row_u[a] != 0.0:
                        in_rows.append(r_in); in_cols.append(stage * nu + a); in_vals.append(row_u[a])
            if stage > 0:
                for a in range(nx):
                    if row_x[a] != 0.0:
                        in_rows.append(r_in); in_cols.append(nU + (stage - 1) * nx + a); in_vals.append(row_x[a])
            for lag in range(stage):
                lam = np.arange(dual_pos, dual_pos + nd)
                dual_pos += nd
                # D^T lam - (coefficient of w_lag) = 0
                add_eq_block(n_eq, lam, DT)
                const = row_x @ Apow[stage - 1 - lag] @ Bw
                for k in range(lag + 1, stage):
                    g = row_x @ Apow[stage - 1 - k] @ sysm.B
                    cols = np.arange(gain_index[k, lag], gain_index[k, lag] + nu * nx)
                    add_eq_block(n_eq, cols, -np.kron(g.reshape(1, -1), Bw.T))
                if row_u is not None and stage < N and lag < stage and (stage, lag) in gain_index:
                    cols = np.arange(gain_index[stage, lag], gain_index[stage, lag] + nu * nx)
                    add_eq_block(n_eq, cols, -np.kron(row_u.reshape(1, -1), Bw.T))
                eq_rhs.extend(const)
                n_eq += nw
                for e in range(nd):
                    if d[e] != 0.0:
                        in_rows.append(r_in); in_cols.append(lam[e]); in_vals.append(d[e])
            in_rhs.append(rhs)
            return r_in

        for i in range(N):
            for r in range(nc):
                idx = robust_row(sysm.F[r], sysm.G[r], i, sysm.b[r])
                if i == 0:
                    self._stage0_rows.append(idx)
        for r in range(nY):
            robust_row(Y[r], None, N, z[r])
        assert dual_pos == n, (dual_pos, n)

        # dynamics: x_{i+1} = A x_i + B u_i, rows placed after the dual matches
        dyn = _dynamics_equalities(sysm, N).tocoo()
        self._dyn_offset = n_eq
        eq_rows.extend(n_eq + dyn.row)
        eq_cols.extend(dyn.col)
        eq_vals.extend(dyn.data)
        eq_rhs.extend(np.zeros(nX))
        n_eq += nX

        A_eq = sp.csc_matrix((eq_vals, (eq_rows, eq_cols)), shape=(n_eq, n))
        A_in = sp.csc_matrix((in_vals, (in_rows, in_cols)), shape=(len(in_rhs), n))
        Pq = sp.block_diag([2.0 * self.weights.R] * N + [2.0 * self.weights.Q] * (N - 1) + [2.0 * self.P]
                           + [sp.csc_matrix((n - nU - nX, n - nU - nX))], format="csc")
        self._b_eq0 = np.asarray(eq_rhs, dtype=float)
        self._b_in0 = np.asarray(in_rhs, dtype=float)
        problem = conic.ConicProblem(c=np.zeros(n), P=Pq, A_eq=A_eq, b_eq=self._b_eq0, A_ineq=A_in,
                                     b_ineq=self._b_in0, nonneg=tuple(range(gain_end, n)))
        slices = {"inputs": slice(0, nU), "states": slice(nU, nU + nX), "gains": slice(nU + nX, gain_end),
                  "duals": slice(gain_end, n)}
        self._gain_index = gain_index
        return MpcQp(problem, 0.0, slices, N, nx, nu)

    @property
    def counts(self) -> dict:
        return self._template.counts()

    def build_qp(self, x, margin: float = 0.0) -> MpcQp:
        x = np.asarray(x, dtype=float)
        sysm = self.system
        b_eq = self._b_eq0.copy()
        b_eq[self._dyn_offset:self._dyn_offset + sysm.nx] = sysm.A @ x
        b_in = self._b_in0 - margin
        b_in[self._stage0_rows] -= sysm.F @ x
        tpl = self._template
        return MpcQp(tpl.problem.with_rhs(b_eq=b_eq, b_ineq=b_in), float(x @ self.weights.Q @ x),
                     tpl.slices, tpl.N, tpl.nx, tpl.nu)

    def gains(self, z: np.ndarray) -> dict:
        """Per-entry gains ``{(i, j): M_ij}`` from a solution vector."""
        nu, nx = self.system.nu, self.system.nx
        return {key: z[p:p + nu * nx].reshape(nu, nx) for key, p in self._gain_index.items()}

    def solve(self, x, backend: str = "conic", margin: float = 0.0) -> ControlDecision:
        if backend not in ("conic", "kernel"):
            raise ValueError(f"unknown backend {backend!r}")
        x = np.asarray(x, dtype=float)
        t0 = time.perf_counter()
        mpc = self.build_qp(x, margin)
        sol = conic.solve(mpc.problem, self.settings)
        return _decision_from_conic(self.name, mpc, sol, x, time.perf_counter() - t0)

    def step(self, x, backend: str = "conic") -> ControlDecision:
        return self.solve(x, backend)

    def is_feasible(self, x, margin: float = 0.0, backend: str = "conic") -> bool:
        return self.solve(x, backend, margin).feasible


def build_fpd_program(system: LinearSystem, N: int, terminal_fpd: PolytopeH, x, weights: CostWeights | None = None,
                      P=None) -> MpcQp:
    weights = weights if weights is not None else CostWeights.identity(system.nx, system.nu)
    P = weights.Q if P is None else P
    return FpdController(system, weights, N, terminal_fpd, P).build_qp(x)


CONTROLLERS = {"oct": OctController, "tmpc": TmpcController, "nominal": NominalController, "fpd": FpdController}


def make_controllers(design: OfflineDesign, system: LinearSystem, weights: CostWeights, names, **kw) -> dict:
    out = {}
    for name in names:
        if name not in CONTROLLERS:
            raise ControllerError(f"unknown controller {name!r}")
        out[name] = CONTROLLERS[name].from_design(design, system, weights, **kw)
    return out
