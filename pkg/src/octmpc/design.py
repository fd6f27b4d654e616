"""Offline phase: terminal ingredients, tube-MPC tightening and the optimized tightening SOCP."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from . import conic
from .model import CostWeights, LinearSystem
from .polytope import (EmptyPolytopeError, MappedPolytope, PolytopeH, UnboundedError, max_admissible_invariant_set,
                       spectral_radius)
from .prediction import DisturbanceFeedback, phi_blocks

logger = logging.getLogger(__name__)

ARTIFACT_VERSION = 1
FALLBACKS = ("none", "cap-by-tmpc")


class DesignError(RuntimeError):
    pass


class DesignInfeasibleError(DesignError):
    pass


class RiccatiError(DesignError):
    pass


# -- terminal controller and cost ------------------------------------------

def riccati_iteration(A, B, Q, R, max_iter: int = 10_000, tol: float = 1e-13):
    """Fixed-point iteration of the discrete Riccati map; returns ``(K, P, iterations)``.

    ``K`` follows the ``u = K x`` sign convention, so ``A + B K`` is the closed loop.
    """
    P = np.array(Q, dtype=float)
    for it in range(1, max_iter + 1):
        S = R + B.T @ P @ B
        K = -np.linalg.solve(S, B.T @ P @ A)
        with np.errstate(over="ignore", invalid="ignore"):
            P_next = Q + A.T @ P @ (A + B @ K)
        P_next = 0.5 * (P_next + P_next.T)
        if not np.all(np.isfinite(P_next)):
            break
        if np.abs(P_next - P).max() <= tol * max(1.0, np.abs(P_next).max()):
            K = -np.linalg.solve(R + B.T @ P_next @ B, B.T @ P_next @ A)
            return K, P_next, it
        P = P_next
    raise RiccatiError(f"Riccati iteration did not converge in {max_iter} iterations (is (A, B) stabilizable?)")


def lqr_terminal_gain(system: LinearSystem, weights: CostWeights, max_iter: int = 10_000) -> np.ndarray:
    return riccati_iteration(system.A, system.B, weights.Q, weights.R, max_iter)[0]


def terminal_cost(system: LinearSystem, weights: CostWeights, K_f) -> np.ndarray:
    """Solve ``Acl^T P Acl - P + Q + K^T R K = 0``."""
    K_f = np.atleast_2d(K_f)
    Acl = system.A + system.B @ K_f
    rho = spectral_radius(Acl)
    if rho >= 1.0:
        raise DesignError(f"A + B K_f is not Schur stable (spectral radius {rho:.6f})")
    P = scipy.linalg.solve_discrete_lyapunov(Acl.T, weights.Q + K_f.T @ weights.R @ K_f)
    return 0.5 * (P + P.T)


def lyapunov_residual(system: LinearSystem, weights: CostWeights, K_f, P) -> float:
    Acl = system.A + system.B @ K_f
    return float(np.linalg.norm(Acl.T @ P @ Acl + weights.Q + K_f.T @ weights.R @ K_f - P, "fro"))


# -- tightenings -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TighteningVector:
    """Per-step tightenings ``t`` of shape ``(N, nc)`` with dual certificates.

    ``Z_blocks[m]`` (``nc x nd``) certifies the support value of the error
    increment ``m + 1`` steps after a disturbance; because the increments only
    depend on the step lag, the stacked certificate of the full horizon
    repeats these blocks (see :meth:`stacked_certificate`).
    """

    t: np.ndarray
    Z_blocks: np.ndarray
    lambda1: np.ndarray | None = None
    lambda2: np.ndarray | None = None
    tail: np.ndarray | None = None

    @property
    def N(self) -> int:
        return self.t.shape[0]

    @property
    def flat(self) -> np.ndarray:
        return self.t.ravel()

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.t))

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.t, axis=0)

    def stacked_certificate(self, d: np.ndarray) -> np.ndarray:
        """Stacked ``Z`` (``nd (N-1) x nc N``): column ``(i, r)`` block ``l`` is ``Z_{i-1-l}[r]``."""
        N, nc = self.t.shape
        nd = d.shape[0]
        Z = np.zeros((nd * (N - 1), nc * N))
        for i in range(1, N):
            for l in range(i):
                Z[l * nd:(l + 1) * nd, i * nc:(i + 1) * nc] = self.Z_blocks[i - 1 - l].T
        return Z

    def to_dict(self) -> dict:
        out = {"t": self.t.tolist(), "Z_blocks": self.Z_blocks.tolist()}
        for key in ("lambda1", "lambda2", "tail"):
            val = getattr(self, key)
            out[key] = None if val is None else val.tolist()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TighteningVector":
        def arr(key):
            return None if data.get(key) is None else np.asarray(data[key], dtype=float)
        Z = np.asarray(data["Z_blocks"], dtype=float)
        return cls(np.asarray(data["t"], dtype=float), Z, arr("lambda1"), arr("lambda2"), arr("tail"))


def tightening_rows(feedback: DisturbanceFeedback, system: LinearSystem) -> list[np.ndarray]:
    """``(F Phi_m + G M_{m+1}) B_w`` for ``m = 0 .. N-1`` (the last uses ``M_N``)."""
    Phi = phi_blocks(feedback, system, feedback.N - 1)
    return [(system.F @ Phi[m] + system.G @ feedback.block(m + 1)) @ system.Bw for m in range(feedback.N)]


def tightening_from_feedback(system: LinearSystem, feedback: DisturbanceFeedback) -> TighteningVector:
    """Row-wise worst-case error tightenings of a fixed feedback, one support LP per row.

    ``t_0 = 0`` and ``t_{i+1} = t_i + h_W(rows_i)``; ``tail`` is the one-step
    increment beyond the horizon that uses ``M_N``.
    """
    rows = tightening_rows(feedback, system)
    N, nc = feedback.N, system.nc
    values, mults = system.W.support_certificates(np.vstack(rows))
    values = values.reshape(N, nc)
    mults = mults.reshape(N, nc, -1)
    t = np.vstack([np.zeros(nc), np.cumsum(values[:N - 1], axis=0)])
    return TighteningVector(t=t, Z_blocks=mults[:N - 1], lambda1=mults[N - 1], tail=values[N - 1])


def tmpc_tightening(system: LinearSystem, K, N: int) -> TighteningVector:
    if not np.all(np.isfinite(system.W.b)):
        raise DesignError("disturbance set must be bounded")
    try:
        return tightening_from_feedback(system, DisturbanceFeedback.from_state_feedback(K, system, N))
    except UnboundedError as exc:
        raise DesignError(f"disturbance set must be bounded: {exc}") from None


# -- terminal sets -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TerminalIngredients:
    K_f: np.ndarray
    P: np.ndarray
    X_T: PolytopeH
    c_F: np.ndarray
    c_Y: np.ndarray

    @property
    def Y(self) -> np.ndarray:
        return self.X_T.A

    @property
    def z(self) -> np.ndarray:
        return self.X_T.b


def terminal_support_constants(X_T: PolytopeH, system: LinearSystem, K_f):
    """``c_F = max_{x in X_T} (F + G K_f) x`` and ``c_Y = max_{x in X_T} Y (A + B K_f) x``."""
    K_f = np.atleast_2d(K_f)
    dirs_F = system.F + system.G @ K_f
    dirs_Y = X_T.A @ (system.A + system.B @ K_f)
    values, mults = X_T.support_certificates(np.vstack([dirs_F, dirs_Y]))
    dirs = np.vstack([dirs_F, dirs_Y])
    if dirs.shape[0] and np.abs(mults @ X_T.A - dirs).max() > 1e-6:
        raise DesignError("support certificate check failed for terminal constants")
    return values[:system.nc], values[system.nc:]


def design_terminal_set(system: LinearSystem, K_f, t_tail, disturbance_image=None, max_iter: int = 200) -> PolytopeH:
    """Maximal invariant set of ``x+ = (A + B K_f) x (+ d)`` inside ``(F + G K_f) x <= b - t_tail``."""
    K_f = np.atleast_2d(K_f)
    constraint = PolytopeH(system.F + system.G @ K_f, system.b - np.asarray(t_tail, dtype=float))
    try:
        X_T = max_admissible_invariant_set(system.A + system.B @ K_f, constraint, disturbance_image, max_iter)
    except EmptyPolytopeError as exc:
        raise DesignInfeasibleError("terminal set is empty; shorten the horizon or relax the constraints") from exc
    if not X_T.contains(np.zeros(system.nx)):
        raise DesignInfeasibleError("terminal set does not contain the origin")
    return X_T


def tube_terminal_set(system: LinearSystem, K_f, N: int, t_tmpc: TighteningVector | None = None) -> PolytopeH:
    """Terminal set of tube MPC for horizon ``N``.

    Robustly invariant for ``x+ = (A+BK)x + (A+BK)^N B_w w`` under the
    stage-``N`` tightened constraint, which makes the tube-gain embedding
    feasible for the terminal conditions of the tightening program.
    """
    K_f = np.atleast_2d(K_f)
    if t_tmpc is None:
        t_tmpc = tmpc_tightening(system, K_f, N)
    Acl = system.A + system.B @ K_f
    image = MappedPolytope(np.linalg.matrix_power(Acl, N) @ system.Bw, system.W)
    return design_terminal_set(system, K_f, t_tmpc.t[-1] + t_tmpc.tail, image)


def robust_invariant_terminal_set(system: LinearSystem, K_f) -> PolytopeH:
    """Maximal robust positively invariant set under ``u = K_f x`` with the full disturbance."""
    return design_terminal_set(system, K_f, np.zeros(system.nc), MappedPolytope(system.Bw, system.W))


# -- optimized tightening ------------------------------------------------------

@dataclass(frozen=True)
class TighteningOptions:
    fallback: str = "cap-by-tmpc"
    t_cap: np.ndarray | None = None
    weights: np.ndarray | None = None
    settings: conic.SolverSettings = conic.DEFAULT_SETTINGS

    def __post_init__(self):
        if self.fallback not in FALLBACKS:
            raise ValueError(f"fallback must be one of {FALLBACKS}, got {self.fallback!r}")


class _Layout:
    """Variable bookkeeping for the tightening program."""

    def __init__(self):
        self.size = 0
        self.slots = {}

    def add(self, name, shape):
        n = int(np.prod(shape))
        self.slots[name] = (self.size, shape)
        self.size += n
        return np.arange(self.size - n, self.size)

    def idx(self, name):
        start, shape = self.slots[name]
        return np.arange(start, start + int(np.prod(shape)))

    def get(self, x, name):
        start, shape = self.slots[name]
        return x[start:start + int(np.prod(shape))].reshape(shape)


def _tightening_program(system: LinearSystem, N: int, terminal: TerminalIngredients, options: TighteningOptions):
    A, B, Bw, F, G = system.A, system.B, system.Bw, system.F, system.G
    D, d = system.D, system.d
    nx, nu, nw, nc, nd = system.nx, system.nu, system.nw, system.nc, D.shape[0]
    Y, z = terminal.Y, terminal.z
    nY = Y.shape[0]
    Apow = [np.eye(nx)]
    for _ in range(N):
        Apow.append(Apow[-1] @ A)

    lay = _Layout()
    for i in range(1, N + 1):
        lay.add(("M", i), (nu, nx))
    for m in range(N - 1):
        lay.add(("Z", m), (nc, nd))
    for i in range(1, N):
        lay.add(("t", i), (nc,))
    lay.add("L1", (nc, nd))
    lay.add("L2", (nY, nd))
    weighted = options.weights is not None
    if weighted:
        for i in range(1, N):
            lay.add(("s", i), (nc,))
    lay.add("gamma", (1,))
    n = lay.size

    eq_rows, eq_rhs = [], []

    def dual_match(mult_name, nrows, left, m):
        """Rows of ``mult D - left Phi_m B_w - (extra) = 0``; returns the block and rhs."""
        blk = np.zeros((nrows * nw, n))
        blk[:, lay.idx(mult_name)] = np.kron(np.eye(nrows), D.T)
        for j in range(m):
            blk[:, lay.idx(("M", m - j))] -= np.kron(left @ Apow[j] @ B, Bw.T)
        return blk, (left @ Apow[m] @ Bw).ravel()

    for m in range(N - 1):
        blk, rhs = dual_match(("Z", m), nc, F, m)
        blk[:, lay.idx(("M", m + 1))] -= np.kron(G, Bw.T)
        eq_rows.append(blk)
        eq_rhs.append(rhs)
    for i in range(1, N):
        blk = np.zeros((nc, n))
        blk[:, lay.idx(("t", i))] = np.eye(nc)
        if i > 1:
            blk[:, lay.idx(("t", i - 1))] = -np.eye(nc)
        blk[:, lay.idx(("Z", i - 1))] = -np.kron(np.eye(nc), d)
        eq_rows.append(blk)
        eq_rhs.append(np.zeros(nc))
    blk, rhs = dual_match("L1", nc, F, N - 1)
    blk[:, lay.idx(("M", N))] -= np.kron(G, Bw.T)
    eq_rows.append(blk)
    eq_rhs.append(rhs)
    if nY:
        blk, rhs = dual_match("L2", nY, Y, N)
        eq_rows.append(blk)
        eq_rhs.append(rhs)
    if weighted:
        w = np.broadcast_to(np.asarray(options.weights, dtype=float).reshape(-1), (N * nc,)).reshape(N, nc)
        for i in range(1, N):
            blk = np.zeros((nc, n))
            blk[:, lay.idx(("s", i))] = np.eye(nc)
            blk[:, lay.idx(("t", i))] = -np.diag(w[i])
            eq_rows.append(blk)
            eq_rhs.append(np.zeros(nc))

    in_rows, in_rhs = [], []
    blk = np.zeros((nc, n))
    blk[:, lay.idx("L1")] = np.kron(np.eye(nc), d)
    blk[:, lay.idx(("t", N - 1))] += np.eye(nc)
    in_rows.append(blk)
    in_rhs.append(system.b - terminal.c_F)
    if nY:
        blk = np.zeros((nY, n))
        blk[:, lay.idx("L2")] = np.kron(np.eye(nY), d)
        in_rows.append(blk)
        in_rhs.append(z - terminal.c_Y)
    cap = None
    if options.fallback == "cap-by-tmpc":
        cap = options.t_cap
        if cap is None:
            cap = tmpc_tightening(system, terminal.K_f, N).t
    for i in range(1, N):
        blk = np.zeros((nc, n))
        blk[:, lay.idx(("t", i))] = np.eye(nc)
        in_rows.append(blk)
        in_rhs.append(system.b if cap is None else np.minimum(system.b, cap[i]))

    nonneg = [lay.idx(("Z", m)) for m in range(N - 1)] + [lay.idx(("t", i)) for i in range(1, N)]
    nonneg += [lay.idx("L1"), lay.idx("L2")]
    cone_key = "s" if weighted else "t"
    cone = np.concatenate([lay.idx("gamma")] + [lay.idx((cone_key, i)) for i in range(1, N)])
    c = np.zeros(n)
    c[lay.idx("gamma")] = 1.0
    problem = conic.ConicProblem(
        c=c,
        A_eq=np.vstack(eq_rows), b_eq=np.concatenate(eq_rhs),
        A_ineq=np.vstack(in_rows), b_ineq=np.concatenate(in_rhs),
        cones=(tuple(cone),),
        nonneg=tuple(np.concatenate(nonneg)),
    )
    return problem, lay


def optimize_tightening(system: LinearSystem, N: int, terminal: TerminalIngredients,
                        options: TighteningOptions | None = None):
    """Minimize ``||t||_2`` over Toeplitz disturbance-feedback gains.

    Returns ``(feedback, tightening, info)``. The program stacks the dual
    reformulation of every row-wise worst-case tightening and the two
    terminal conditions; ``t_0`` is pinned to zero.
    """
    options = options or TighteningOptions()
    if N < 2:
        raise ValueError("horizon must be at least 2")
    nx, nu, nc = system.nx, system.nu, system.nc
    problem, lay = _tightening_program(system, N, terminal, options)
    start = time.perf_counter()
    sol = conic.solve(problem, options.settings)
    wall = time.perf_counter() - start
    info = {
        "status": sol.status,
        "iterations": sol.iterations,
        "solve_time": sol.solve_time,
        "wall_time": wall,
        "n_variables": problem.n_variables,
        "n_constraints": problem.n_constraints,
    }
    if sol.status == conic.INFEASIBLE:
        raise DesignInfeasibleError("tightening program is infeasible")
    if not sol.optimal:
        raise DesignError(f"tightening program failed: {sol.status} {sol.info}")
    x = sol.x
    feedback = DisturbanceFeedback(
        tuple(lay.get(x, ("M", i)).copy() for i in range(1, N)), lay.get(x, ("M", N)).copy())
    Z = np.stack([np.maximum(lay.get(x, ("Z", m)), 0.0) for m in range(N - 1)])
    t_socp = np.vstack([np.zeros(nc), np.cumsum(Z @ system.d, axis=0)])
    # The program's duals only bound each increment from above to solver
    # accuracy; re-derive t from the returned gains with exact certificates.
    # This can only lower t, so every constraint of the program still holds.
    exact = tightening_from_feedback(system, feedback)
    if np.all(exact.t <= t_socp + 1e-6):
        t, Z = exact.t, exact.Z_blocks
    else:
        t = t_socp
    L1 = np.maximum(lay.get(x, "L1"), 0.0)
    L2 = np.maximum(lay.get(x, "L2"), 0.0)
    info["objective"] = float(np.linalg.norm(t))
    info["socp_objective"] = float(sol.objective)
    info["certificate_gap"] = float(np.abs(t_socp - exact.t).max())
    info["residual"] = conic.primal_residual(problem, x)
    return feedback, TighteningVector(t=t, Z_blocks=Z, lambda1=L1, lambda2=L2, tail=exact.tail), info


# -- orchestration ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class OfflineDesign:
    """Everything the online controllers need, produced once offline."""

    N: int
    terminal: TerminalIngredients
    feedback: DisturbanceFeedback
    tightening: TighteningVector
    tmpc: TighteningVector
    terminal_fpd: PolytopeH | None = None
    fallback: str = "cap-by-tmpc"
    stats: dict = field(default_factory=dict)
    config_hash: str | None = None

    def to_dict(self) -> dict:
        term = self.terminal
        return {
            "artifact_version": ARTIFACT_VERSION,
            "config_hash": self.config_hash,
            "N": self.N,
            "fallback": self.fallback,
            "K_f": term.K_f.tolist(),
            "P": term.P.tolist(),
            "terminal_set": term.X_T.to_dict(),
            "c_F": term.c_F.tolist(),
            "c_Y": term.c_Y.tolist(),
            "feedback": self.feedback.to_dict(),
            "tightening": self.tightening.to_dict(),
            "tmpc_tightening": self.tmpc.to_dict(),
            "terminal_set_fpd": None if self.terminal_fpd is None else self.terminal_fpd.to_dict(),
            "stats": self.stats,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "OfflineDesign":
        version = data.get("artifact_version")
        if version != ARTIFACT_VERSION:
            raise DesignError(f"unsupported artifact version {version!r}")
        terminal = TerminalIngredients(
            K_f=np.atleast_2d(np.asarray(data["K_f"], dtype=float)),
            P=np.atleast_2d(np.asarray(data["P"], dtype=float)),
            X_T=PolytopeH.from_dict(data["terminal_set"]),
            c_F=np.asarray(data["c_F"], dtype=float),
            c_Y=np.asarray(data["c_Y"], dtype=float),
        )
        fpd = data.get("terminal_set_fpd")
        return cls(
            N=int(data["N"]),
            terminal=terminal,
            feedback=DisturbanceFeedback.from_dict(data["feedback"]),
            tightening=TighteningVector.from_dict(data["tightening"]),
            tmpc=TighteningVector.from_dict(data["tmpc_tightening"]),
            terminal_fpd=None if fpd is None else PolytopeH.from_dict(fpd),
            fallback=data.get("fallback", "cap-by-tmpc"),
            stats=data.get("stats", {}),
            config_hash=data.get("config_hash"),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "OfflineDesign":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def design_offline(system: LinearSystem, weights: CostWeights, N: int, fallback: str = "cap-by-tmpc",
                   with_fpd: bool = True, max_retries: int = 5, shrink: float = 0.9,
                   settings: conic.SolverSettings = conic.DEFAULT_SETTINGS,
                   config_hash: str | None = None) -> OfflineDesign:
    """Terminal gain and cost, tube terminal set, constants, then the tightening program.

    If the program is infeasible the terminal set is scaled by ``shrink`` and
    the program re-solved, at most ``max_retries`` times.
    """
    system.check()
    t0 = time.perf_counter()
    K_f, _, riccati_iters = riccati_iteration(system.A, system.B, weights.Q, weights.R)
    P = terminal_cost(system, weights, K_f)
    t_tmpc = tmpc_tightening(system, K_f, N)
    if np.any(t_tmpc.t[-1] + t_tmpc.tail > system.b):
        raise DesignInfeasibleError("tube tightening exhausts the constraint set; shorten the horizon")
    X_T = tube_terminal_set(system, K_f, N, t_tmpc)
    options = TighteningOptions(fallback=fallback, t_cap=t_tmpc.t, settings=settings)

    scale = 1.0
    for attempt in range(max_retries + 1):
        X_used = X_T if scale == 1.0 else X_T.scaled(scale)
        c_F, c_Y = terminal_support_constants(X_used, system, K_f)
        terminal = TerminalIngredients(K_f=K_f, P=P, X_T=X_used, c_F=c_F, c_Y=c_Y)
        try:
            feedback, tightening, info = optimize_tightening(system, N, terminal, options)
            break
        except DesignInfeasibleError:
            if attempt == max_retries:
                raise
            logger.warning("tightening program infeasible; shrinking terminal set (attempt %d)", attempt + 1)
            scale *= shrink

    terminal_fpd = None
    if with_fpd:
        try:
            terminal_fpd = robust_invariant_terminal_set(system, K_f)
        except DesignError as exc:
            logger.warning("robust invariant terminal set unavailable: %s", exc)
    stats = {
        "socp": info,
        "norm_t": tightening.norm,
        "norm_t_tmpc": t_tmpc.norm,
        "terminal_rows": X_T.n_rows,
        "terminal_scale": scale,
        "riccati_iterations": riccati_iters,
        "lyapunov_residual": lyapunov_residual(system, weights, K_f, P),
        "design_time": time.perf_counter() - t0,
    }
    return OfflineDesign(N=N, terminal=terminal, feedback=feedback, tightening=tightening, tmpc=t_tmpc,
                         terminal_fpd=terminal_fpd, fallback=fallback, stats=stats, config_hash=config_hash)


def hash_payload(payload) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()
