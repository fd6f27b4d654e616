"""Halfspace-representation polytopes with LP-backed support functions."""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np

from . import conic

logger = logging.getLogger(__name__)

ABS_TOL = 1e-9


class PolytopeError(RuntimeError):
    pass


class EmptyPolytopeError(PolytopeError):
    pass


class UnboundedError(PolytopeError):
    pass


class ConvergenceError(PolytopeError):
    """Invariant-set iteration hit ``max_iter``; ``last`` holds the final iterate."""

    def __init__(self, msg, last=None):
        super().__init__(msg)
        self.last = last


class PolytopeH:
    """Polytope ``{x | A x <= b}``.

    Rows are scaled to unit Euclidean norm on construction unless
    ``normalize=False``.  All-zero rows with a nonnegative offset carry no
    information and are dropped; one with a negative offset makes the set empty
    and is kept so that emptiness is visible to the LP.
    """

    __slots__ = ("A", "b")

    def __init__(self, A, b, normalize: bool = True):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        b = np.atleast_1d(np.asarray(b, dtype=float)).ravel()
        if A.shape[0] != b.shape[0]:
            raise ValueError(f"normal matrix has {A.shape[0]} rows but offset has {b.shape[0]} entries")
        if normalize and A.shape[0]:
            norms = np.linalg.norm(A, axis=1)
            zero = norms == 0
            keep = ~zero | (b < 0)
            scale = np.where(zero, 1.0, norms)
            A = (A / scale[:, None])[keep]
            b = (b / scale)[keep]
        A.setflags(write=False)
        b.setflags(write=False)
        self.A = A
        self.b = b

    @classmethod
    def box(cls, lower, upper) -> "PolytopeH":
        lower = np.atleast_1d(np.asarray(lower, dtype=float))
        upper = np.atleast_1d(np.asarray(upper, dtype=float))
        n = lower.size
        return cls(np.vstack([np.eye(n), -np.eye(n)]), np.concatenate([upper, -lower]))

    @classmethod
    def origin(cls, dim: int) -> "PolytopeH":
        return cls.box(np.zeros(dim), np.zeros(dim))

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    @property
    def n_rows(self) -> int:
        return self.A.shape[0]

    def __repr__(self):
        return f"PolytopeH(dim={self.dim}, rows={self.n_rows})"

    # -- support functions -------------------------------------------------

    def _support_lp(self, direction) -> conic.ConicProblem:
        return conic.ConicProblem(c=-np.asarray(direction, dtype=float), A_ineq=self.A, b_ineq=self.b)

    def _support_result(self, sol: conic.ConicSolution, direction) -> tuple[float, np.ndarray]:
        if sol.status == conic.INFEASIBLE:
            raise EmptyPolytopeError("support query on an empty polytope")
        if sol.status == conic.UNBOUNDED:
            raise UnboundedError(f"polytope unbounded along {direction}")
        if not sol.optimal:
            raise PolytopeError(f"support LP failed ({sol.status}, {sol.info})")
        mult = np.maximum(sol.dual_ineq, 0.0)
        polished = self._polish(mult, sol.x, direction)
        if polished is not None:
            mult = polished
        return float(mult @ self.b), mult

    def _polish(self, mult, x, direction):
        """Re-solve the optimality conditions on the active rows exactly.

        Interior-point duals are accurate to the solver tolerance only; when
        the active rows pin down both a primal point and nonnegative
        multipliers, the exact pair replaces them.
        """
        idx = np.nonzero(mult > 1e-6 * max(1.0, float(mult.max())))[0]
        if idx.size == 0:
            return None
        A_act = self.A[idx]
        lam, *_ = np.linalg.lstsq(A_act.T, direction, rcond=None)
        scale = max(1.0, float(np.abs(direction).max()))
        if np.any(lam < 0) or np.abs(A_act.T @ lam - direction).max() > 1e-12 * scale:
            return None
        x_act = x + np.linalg.lstsq(A_act, self.b[idx] - A_act @ x, rcond=None)[0]
        slack_scale = max(1.0, float(np.abs(self.b).max()))
        if np.any(self.A @ x_act > self.b + 1e-11 * slack_scale):
            return None
        out = np.zeros_like(mult)
        out[idx] = lam
        return out

    def support(self, direction) -> float:
        return self.support_dual_certificate(direction)[0]

    def support_dual_certificate(self, direction) -> tuple[float, np.ndarray]:
        """Return ``(max_x a^T x, lam)`` with ``lam >= 0``, ``lam^T A = a``, ``lam^T b = value``.

        The value is reported as ``lam^T b`` so the certificate is exact in the
        second equality; the first holds to solver tolerance.
        """
        direction = np.atleast_1d(np.asarray(direction, dtype=float))
        if direction.shape != (self.dim,):
            raise ValueError(f"direction has shape {direction.shape}, expected {(self.dim,)}")
        if not np.any(direction):
            if self.is_empty():
                raise EmptyPolytopeError("support query on an empty polytope")
            return 0.0, np.zeros(self.n_rows)
        return self._support_result(conic.solve(self._support_lp(direction)), direction)

    def support_many(self, directions) -> np.ndarray:
        """Row-wise support values for a matrix of directions."""
        directions = np.atleast_2d(np.asarray(directions, dtype=float))
        return self.support_certificates(directions)[0]

    def support_certificates(self, directions) -> tuple[np.ndarray, np.ndarray]:
        directions = np.atleast_2d(np.asarray(directions, dtype=float))
        values = np.zeros(directions.shape[0])
        mults = np.zeros((directions.shape[0], self.n_rows))
        todo = [i for i in range(directions.shape[0]) if np.any(directions[i])]
        if len(todo) < directions.shape[0] and self.is_empty():
            raise EmptyPolytopeError("support query on an empty polytope")
        sols = conic.solve_lp_batch([self._support_lp(directions[i]) for i in todo])
        for i, sol in zip(todo, sols):
            values[i], mults[i] = self._support_result(sol, directions[i])
        return values, mults

    # -- predicates ---------------------------------------------------------

    def contains(self, x, tol: float = 1e-8) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(self.A @ x <= self.b + tol))

    def is_empty(self) -> bool:
        sol = conic.solve(conic.ConicProblem(c=np.zeros(self.dim), A_ineq=self.A, b_ineq=self.b))
        if sol.status == conic.INFEASIBLE:
            return True
        if not sol.optimal:
            raise PolytopeError(f"feasibility LP failed ({sol.status})")
        return False

    def is_bounded(self) -> bool:
        eye = np.eye(self.dim)
        try:
            self.support_many(np.vstack([eye, -eye]))
        except UnboundedError:
            return False
        return True

    def contains_polytope(self, other: "PolytopeH", tol: float = 1e-8) -> bool:
        """True if ``other`` is a subset of this polytope."""
        return bool(np.all(other.support_many(self.A) <= self.b + tol))

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        eye = np.eye(self.dim)
        s = self.support_many(np.vstack([eye, -eye]))
        return -s[self.dim:], s[:self.dim]

    # -- constructions ------------------------------------------------------

    def intersect(self, other: "PolytopeH") -> "PolytopeH":
        return PolytopeH(np.vstack([self.A, other.A]), np.concatenate([self.b, other.b]), normalize=False)

    def scaled(self, factor: float) -> "PolytopeH":
        return PolytopeH(self.A, factor * self.b, normalize=False)

    def remove_redundant(self, tol: float = 1e-9) -> "PolytopeH":
        """Drop rows implied by the remaining ones (one LP per row)."""
        A, b = self.A, self.b
        if A.shape[0] <= 1:
            return self
        # exact duplicates first; cheap and common after unit-norm scaling
        key = np.round(np.hstack([A, b[:, None]]), 12)
        _, first = np.unique(key, axis=0, return_index=True)
        keep = np.zeros(A.shape[0], dtype=bool)
        keep[np.sort(first)] = True
        for i in range(A.shape[0]):
            if not keep[i]:
                continue
            keep[i] = False
            if not np.any(keep):
                keep[i] = True
                continue
            rest = PolytopeH(A[keep], b[keep], normalize=False)
            sol = conic.solve(conic.ConicProblem(
                c=-A[i], A_ineq=np.vstack([rest.A, A[i]]), b_ineq=np.concatenate([rest.b, [b[i] + 1.0]])))
            if sol.status == conic.INFEASIBLE:
                raise EmptyPolytopeError("polytope is empty")
            if not sol.optimal or -sol.objective > b[i] + tol:
                keep[i] = True
        return PolytopeH(A[keep], b[keep], normalize=False)

    def chebyshev_center(self) -> tuple[np.ndarray, float]:
        """Centre and radius of the largest inscribed ball."""
        norms = np.linalg.norm(self.A, axis=1)
        c = np.zeros(self.dim + 1)
        c[-1] = -1.0
        sol = conic.solve(conic.ConicProblem(c=c, A_ineq=np.hstack([self.A, norms[:, None]]), b_ineq=self.b))
        if sol.status == conic.INFEASIBLE:
            raise EmptyPolytopeError("polytope is empty")
        if sol.status == conic.UNBOUNDED:
            raise UnboundedError("polytope contains arbitrarily large balls")
        if not sol.optimal:
            raise PolytopeError(f"Chebyshev-centre LP failed ({sol.status})")
        return sol.x[:-1], float(sol.x[-1])

    def sample(self, n: int, rng: np.random.Generator, max_tries: int = 200) -> np.ndarray:
        """Uniform samples; rejection from the bounding box, hit-and-run when that is too wasteful."""
        lo, hi = self.bounding_box()
        out = []
        for _ in range(max_tries if self.dim <= 3 else 5):
            cand = rng.uniform(lo, hi, size=(max(4 * n, 64), self.dim))
            inside = np.all(cand @ self.A.T <= self.b + 1e-12, axis=1)
            out.extend(cand[inside])
            if len(out) >= n:
                return np.asarray(out[:n])
        return self._hit_and_run(n, rng)

    def _hit_and_run(self, n: int, rng: np.random.Generator, thin: int = 10) -> np.ndarray:
        """Approximately uniform samples from a random walk started at the Chebyshev centre."""
        x, r = self.chebyshev_center()
        if r <= 0:
            raise PolytopeError("polytope has empty interior; cannot sample")
        A, b = self.A, self.b
        out = np.empty((n, self.dim))
        for k in range(n * thin + 10 * self.dim):
            d = rng.standard_normal(self.dim)
            d /= np.linalg.norm(d)
            ad, slack = A @ d, b - A @ x
            with np.errstate(divide="ignore"):
                steps = slack / ad
            t_hi = np.min(steps[ad > 1e-14], initial=np.inf)
            t_lo = np.max(steps[ad < -1e-14], initial=-np.inf)
            x = x + rng.uniform(t_lo, t_hi) * d
            j = k - 10 * self.dim
            if j >= 0 and j % thin == 0:
                out[j // thin] = x
        return out

    def vertices(self, max_dim: int = 6) -> np.ndarray:
        """Exact vertex enumeration by brute force over row subsets.

        Intended as a test oracle; refuses dimensions above ``max_dim``.
        """
        n = self.dim
        if n > max_dim:
            raise ValueError(f"vertex enumeration refused for dimension {n} > {max_dim}")
        A, b = self.A, self.b
        verts: list[np.ndarray] = []
        for rows in itertools.combinations(range(A.shape[0]), n):
            sub = A[list(rows)]
            if abs(np.linalg.det(sub)) < 1e-12:
                continue
            v = np.linalg.solve(sub, b[list(rows)])
            if np.all(A @ v <= b + 1e-9) and not any(np.allclose(v, u, atol=1e-9, rtol=0) for u in verts):
                verts.append(v)
        if not verts and not self.is_empty() and not self.is_bounded():
            raise UnboundedError("vertex enumeration on an unbounded polytope")
        return np.asarray(verts).reshape(-1, n)

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return {"A": self.A.tolist(), "b": self.b.tolist()}

    @classmethod
    def from_dict(cls, data: dict, normalize: bool = False) -> "PolytopeH":
        A = np.asarray(data["A"], dtype=float)
        b = np.asarray(data["b"], dtype=float)
        if A.size == 0:
            A = A.reshape(0, int(data.get("dim", 0)))
        return cls(A, b, normalize=normalize)


@dataclass(frozen=True, eq=False)
class MappedPolytope:
    """Linear image ``{M w | w in base}``; only the support function is offered."""

    matrix: np.ndarray
    base: PolytopeH

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def support_many(self, directions) -> np.ndarray:
        directions = np.atleast_2d(np.asarray(directions, dtype=float))
        return self.base.support_many(directions @ self.matrix)

    def support(self, direction) -> float:
        return float(self.support_many(np.atleast_2d(direction))[0])


def spectral_radius(M) -> float:
    M = np.atleast_2d(M)
    return float(np.max(np.abs(np.linalg.eigvals(M)))) if M.size else 0.0


def max_admissible_invariant_set(A_cl, constraint: PolytopeH, disturbance_image=None,
                                 max_iter: int = 200, tol: float = 1e-9) -> PolytopeH:
    """Maximal robust positively invariant subset of ``constraint`` for ``x+ = A_cl x + d``.

    ``disturbance_image`` is any object with ``support_many`` (a
    :class:`PolytopeH` or :class:`MappedPolytope`), or ``None`` for the
    undisturbed case.  Rows ``H A_cl^k x <= h - sum_{j<k} h_D(H A_cl^j)`` are
    appended until the newest block is redundant for the current iterate,
    i.e. successive iterates contain each other.
    """
    A_cl = np.atleast_2d(np.asarray(A_cl, dtype=float))
    rho = spectral_radius(A_cl)
    if rho >= 1.0:
        raise ValueError(f"closed loop not Schur stable (spectral radius {rho:.6f})")
    H, h = constraint.A, constraint.b
    current = constraint.remove_redundant()
    HAk = H.copy()
    offset = h.copy()
    for it in range(1, max_iter + 1):
        if disturbance_image is not None:
            offset = offset - disturbance_image.support_many(HAk)
        HAk = HAk @ A_cl
        candidate = PolytopeH(HAk, offset, normalize=True)
        # a vanishing row 0 <= negative offset has survived normalization: empty set
        if np.any((np.linalg.norm(candidate.A, axis=1) == 0) & (candidate.b < 0)):
            raise EmptyPolytopeError("invariant set is empty (terminal set design failed)")
        if candidate.n_rows == 0:
            return current
        try:
            reach = current.support_many(candidate.A)
        except EmptyPolytopeError:
            raise EmptyPolytopeError("invariant set is empty (terminal set design failed)") from None
        if np.all(reach <= candidate.b + tol):
            logger.debug("invariant set converged after %d iterations, %d rows", it, current.n_rows)
            return current
        nxt = current.intersect(candidate)
        if nxt.is_empty():
            raise EmptyPolytopeError("invariant set is empty (terminal set design failed)")
        current = nxt.remove_redundant()
    raise ConvergenceError(f"no fixed point within {max_iter} iterations", last=current)
