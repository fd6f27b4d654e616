"""Uniform LP / convex QP / SOCP contract on top of the Clarabel interior-point solver.

Problems are stated as::

    minimize    c^T x + 1/2 x^T P x
    subject to  A_eq x  = b_eq
                A_ineq x <= b_ineq
                x[i] >= 0                    for i in nonneg
                x[k0] >= ||x[k1], x[k2], ...||  for every cone block (k0, k1, ...)
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import clarabel
import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
NUMERICAL_FAILURE = "numerical-failure"


class DimensionError(ValueError):
    """Raised when problem data have inconsistent shapes or violate structural invariants."""


@dataclass(frozen=True)
class SolverSettings:
    tolerance: float = 1e-8
    max_iter: int = 200
    time_limit: float = float("inf")
    verbose: bool = False


DEFAULT_SETTINGS = SolverSettings()


def _as_matrix(M, ncols: int, name: str):
    if M is None:
        return sp.csc_matrix((0, ncols))
    if sp.issparse(M):
        M = sp.csc_matrix(M, dtype=float)
    else:
        M = np.atleast_2d(np.asarray(M, dtype=float))
        if M.size == 0:
            M = M.reshape(0, ncols)
        M = sp.csc_matrix(M)
    if M.shape[1] != ncols:
        raise DimensionError(f"{name} has {M.shape[1]} columns, expected {ncols}")
    return M


def _as_vector(v, n: int, name: str) -> np.ndarray:
    v = np.zeros(0) if v is None else np.atleast_1d(np.asarray(v, dtype=float)).ravel()
    if v.shape[0] != n:
        raise DimensionError(f"{name} has length {v.shape[0]}, expected {n}")
    return v


@dataclass(frozen=True, eq=False)
class ConicProblem:
    c: np.ndarray
    P: sp.csc_matrix | None = None
    A_eq: sp.csc_matrix | None = None
    b_eq: np.ndarray | None = None
    A_ineq: sp.csc_matrix | None = None
    b_ineq: np.ndarray | None = None
    cones: tuple[tuple[int, ...], ...] = ()
    nonneg: tuple[int, ...] = ()

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.c, dtype=float)).ravel()
        n = c.shape[0]
        object.__setattr__(self, "c", c)
        A_eq = _as_matrix(self.A_eq, n, "A_eq")
        A_ineq = _as_matrix(self.A_ineq, n, "A_ineq")
        object.__setattr__(self, "A_eq", A_eq)
        object.__setattr__(self, "A_ineq", A_ineq)
        object.__setattr__(self, "b_eq", _as_vector(self.b_eq, A_eq.shape[0], "b_eq"))
        object.__setattr__(self, "b_ineq", _as_vector(self.b_ineq, A_ineq.shape[0], "b_ineq"))

        if self.P is not None:
            P = sp.csc_matrix(self.P, dtype=float)
            if P.shape != (n, n):
                raise DimensionError(f"P has shape {P.shape}, expected {(n, n)}")
            if P.nnz and abs(P - P.T).max() > 1e-10:
                raise DimensionError("quadratic term is not symmetric")
            if P.nnz:
                _check_psd(P)
                object.__setattr__(self, "P", P)
            else:
                object.__setattr__(self, "P", None)

        cones = tuple(tuple(int(i) for i in cone) for cone in self.cones)
        seen: set[int] = set()
        for cone in cones:
            if len(cone) < 1:
                raise DimensionError("empty cone block")
            if any(i < 0 or i >= n for i in cone):
                raise DimensionError("cone index out of range")
            if seen.intersection(cone) or len(set(cone)) != len(cone):
                raise DimensionError("cone index lists must be disjoint")
            seen.update(cone)
        object.__setattr__(self, "cones", cones)
        nonneg = tuple(int(i) for i in self.nonneg)
        if any(i < 0 or i >= n for i in nonneg):
            raise DimensionError("nonnegativity index out of range")
        object.__setattr__(self, "nonneg", nonneg)

    @property
    def n_variables(self) -> int:
        return self.c.shape[0]

    def with_rhs(self, b_eq=None, b_ineq=None) -> "ConicProblem":
        """Copy with new right-hand sides; matrices are shared and not re-validated."""
        out = object.__new__(ConicProblem)
        out.__dict__.update(self.__dict__)
        if b_eq is not None:
            out.__dict__["b_eq"] = _as_vector(b_eq, self.A_eq.shape[0], "b_eq")
        if b_ineq is not None:
            out.__dict__["b_ineq"] = _as_vector(b_ineq, self.A_ineq.shape[0], "b_ineq")
        return out

    @property
    def n_constraints(self) -> int:
        """Equality plus inequality rows (bounds and cones excluded)."""
        return self.A_eq.shape[0] + self.A_ineq.shape[0]

    @property
    def is_lp(self) -> bool:
        return self.P is None and not self.cones


def _check_psd(P: sp.csc_matrix) -> None:
    dense = P.toarray()
    scale = max(1.0, float(np.abs(dense).max()))
    try:
        np.linalg.cholesky(dense + 1e-9 * scale * np.eye(dense.shape[0]))
    except np.linalg.LinAlgError:
        raise DimensionError("quadratic term is not positive semidefinite") from None


@dataclass(frozen=True, eq=False)
class ConicSolution:
    status: str
    x: np.ndarray | None = None
    dual_ineq: np.ndarray | None = None
    dual_eq: np.ndarray | None = None
    objective: float = float("nan")
    solve_time: float = 0.0
    iterations: int = 0
    info: dict = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


_STATUS_MAP = {
    "Solved": OPTIMAL,
    "PrimalInfeasible": INFEASIBLE,
    "AlmostPrimalInfeasible": INFEASIBLE,
    "DualInfeasible": UNBOUNDED,
    "AlmostDualInfeasible": UNBOUNDED,
}


def primal_residual(problem: ConicProblem, x: np.ndarray) -> float:
    """Largest violation of any constraint at ``x`` (absolute units)."""
    worst = 0.0
    if problem.A_eq.shape[0]:
        worst = max(worst, float(np.abs(problem.A_eq @ x - problem.b_eq).max()))
    if problem.A_ineq.shape[0]:
        worst = max(worst, float(np.max(problem.A_ineq @ x - problem.b_ineq, initial=0.0)))
    if problem.nonneg:
        worst = max(worst, float(np.max(-x[list(problem.nonneg)], initial=0.0)))
    for cone in problem.cones:
        head, tail = x[cone[0]], x[list(cone[1:])]
        worst = max(worst, float(np.linalg.norm(tail) - head))
    return worst


def solve(problem: ConicProblem, settings: SolverSettings = DEFAULT_SETTINGS) -> ConicSolution:
    n = problem.n_variables
    n_eq = problem.A_eq.shape[0]
    n_in = problem.A_ineq.shape[0]
    blocks = [problem.A_eq, problem.A_ineq]
    rhs = [problem.b_eq, problem.b_ineq]
    cones = []
    if n_eq:
        cones.append(clarabel.ZeroConeT(n_eq))
    n_nonneg = n_in
    if problem.nonneg:
        idx = np.asarray(problem.nonneg)
        blocks.append(sp.csc_matrix((-np.ones(idx.size), (np.arange(idx.size), idx)), shape=(idx.size, n)))
        rhs.append(np.zeros(idx.size))
        n_nonneg += idx.size
    if n_nonneg:
        cones.append(clarabel.NonnegativeConeT(n_nonneg))
    for cone in problem.cones:
        k = len(cone)
        blocks.append(sp.csc_matrix((-np.ones(k), (np.arange(k), np.asarray(cone))), shape=(k, n)))
        rhs.append(np.zeros(k))
        cones.append(clarabel.SecondOrderConeT(k))
    A = sp.vstack(blocks, format="csc")
    b = np.concatenate(rhs)
    P = sp.triu(problem.P, format="csc") if problem.P is not None else sp.csc_matrix((n, n))

    s = clarabel.DefaultSettings()
    s.verbose = settings.verbose
    s.max_iter = settings.max_iter
    s.time_limit = settings.time_limit
    s.tol_feas = settings.tolerance
    s.tol_gap_abs = settings.tolerance
    s.tol_gap_rel = settings.tolerance
    try:
        raw = clarabel.DefaultSolver(P, problem.c, A, b, cones, s).solve()
    except Exception as exc:  # solver-internal panic surfaces as a status
        logger.warning("conic solver raised: %s", exc)
        return ConicSolution(NUMERICAL_FAILURE, info={"error": str(exc)})

    raw_status = str(raw.status)
    status = _STATUS_MAP.get(raw_status, NUMERICAL_FAILURE)
    x = np.asarray(raw.x, dtype=float)
    z = np.asarray(raw.z, dtype=float)
    info = {"raw_status": raw_status, "r_prim": raw.r_prim, "r_dual": raw.r_dual}
    if raw_status == "AlmostSolved":
        # reduced accuracy: accept only if our own residual check passes
        res = primal_residual(problem, x)
        info["residual"] = res
        status = OPTIMAL if res <= 10 * settings.tolerance * max(1.0, np.abs(b).max(initial=0.0)) else NUMERICAL_FAILURE
    if status != OPTIMAL:
        return ConicSolution(status, solve_time=raw.solve_time, iterations=raw.iterations, info=info)
    return ConicSolution(
        OPTIMAL,
        x=x,
        dual_ineq=z[n_eq:n_eq + n_in],
        dual_eq=z[:n_eq],
        objective=float(raw.obj_val),
        solve_time=raw.solve_time,
        iterations=raw.iterations,
        info=info,
    )


def solve_lp_batch(problems: Sequence[ConicProblem], settings: SolverSettings = DEFAULT_SETTINGS) -> list[ConicSolution]:
    out = []
    for problem in problems:
        if not problem.is_lp:
            raise DimensionError("solve_lp_batch accepts linear programs only")
        try:
            out.append(solve(problem, settings))
        except Exception as exc:
            out.append(ConicSolution(NUMERICAL_FAILURE, info={"error": str(exc)}))
    return out
