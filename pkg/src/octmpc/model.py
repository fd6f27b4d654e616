"""Discrete LTI systems with polytopic stage constraints and additive disturbances."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .polytope import PolytopeError, PolytopeH

logger = logging.getLogger(__name__)


class ModelError(ValueError):
    pass


def _mat(M, rows=None) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim == 0:
        M = M.reshape(1, 1)
    elif M.ndim == 1:
        M = M.reshape(-1, 1) if rows is None or rows == M.size else M.reshape(1, -1)
    return M


def forward_euler_discretize(A_c, B_c, Bw_c, T: float):
    """``x+ = (I + T A_c) x + T B_c u + T Bw_c w``."""
    if not T > 0:
        raise ModelError(f"sampling time must be positive, got {T}")
    A_c = _mat(A_c)
    return np.eye(A_c.shape[0]) + T * A_c, T * _mat(B_c, A_c.shape[0]), T * _mat(Bw_c, A_c.shape[0])


def box_constraints(x_max, u_max, nx: int, nu: int):
    """Expand ``|x_i| <= x_max_i`` and ``|u_j| <= u_max_j`` into ``F x + G u <= b`` rows.

    Either bound may be ``None`` to leave that signal unconstrained.
    """
    F_rows, G_rows, b = [], [], []
    if x_max is not None:
        x_max = np.broadcast_to(np.asarray(x_max, dtype=float), (nx,))
        for i in range(nx):
            for sign in (1.0, -1.0):
                row = np.zeros(nx)
                row[i] = sign
                F_rows.append(row)
                G_rows.append(np.zeros(nu))
                b.append(x_max[i])
    if u_max is not None:
        u_max = np.broadcast_to(np.asarray(u_max, dtype=float), (nu,))
        for j in range(nu):
            for sign in (1.0, -1.0):
                row = np.zeros(nu)
                row[j] = sign
                F_rows.append(np.zeros(nx))
                G_rows.append(row)
                b.append(u_max[j])
    return np.array(F_rows).reshape(-1, nx), np.array(G_rows).reshape(-1, nu), np.array(b)


@dataclass(frozen=True, eq=False)
class LinearSystem:
    """``x+ = A x + B u + Bw w`` with ``F x + G u <= b`` and ``w`` in ``W``."""

    A: np.ndarray
    B: np.ndarray
    Bw: np.ndarray
    F: np.ndarray
    G: np.ndarray
    b: np.ndarray
    W: PolytopeH
    name: str = "system"

    def __post_init__(self):
        A = _mat(self.A)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", _mat(self.B, A.shape[0]))
        object.__setattr__(self, "Bw", _mat(self.Bw, A.shape[0]))
        object.__setattr__(self, "F", np.atleast_2d(np.asarray(self.F, dtype=float)))
        object.__setattr__(self, "G", np.atleast_2d(np.asarray(self.G, dtype=float)))
        object.__setattr__(self, "b", np.atleast_1d(np.asarray(self.b, dtype=float)).ravel())

    @property
    def nx(self) -> int:
        return self.A.shape[0]

    @property
    def nu(self) -> int:
        return self.B.shape[1]

    @property
    def nw(self) -> int:
        return self.Bw.shape[1]

    @property
    def nc(self) -> int:
        return self.b.shape[0]

    @property
    def D(self) -> np.ndarray:
        return self.W.A

    @property
    def d(self) -> np.ndarray:
        return self.W.b

    def step(self, x, u, w) -> np.ndarray:
        return self.A @ x + self.B @ u + self.Bw @ w

    def with_disturbance(self, W: PolytopeH) -> "LinearSystem":
        return LinearSystem(self.A, self.B, self.Bw, self.F, self.G, self.b, W, self.name)

    def validate(self) -> list[str]:
        """List violated invariants; an empty list means the system is usable."""
        problems = []
        nx = self.A.shape[0]
        if self.A.shape != (nx, nx):
            problems.append(f"A must be square, got {self.A.shape}")
        if self.B.shape[0] != nx:
            problems.append(f"B has {self.B.shape[0]} rows, expected {nx}")
        if self.Bw.shape[0] != nx:
            problems.append(f"Bw has {self.Bw.shape[0]} rows, expected {nx}")
        nc = self.b.shape[0]
        if self.F.shape != (nc, nx):
            problems.append(f"F has shape {self.F.shape}, expected {(nc, nx)}")
        if self.G.shape != (nc, self.B.shape[1]):
            problems.append(f"G has shape {self.G.shape}, expected {(nc, self.B.shape[1])}")
        if self.W.dim != self.Bw.shape[1]:
            problems.append(f"W has dimension {self.W.dim}, Bw has {self.Bw.shape[1]} columns")
        else:
            try:
                if not self.W.is_bounded():
                    problems.append("disturbance set W is unbounded")
            except PolytopeError:
                problems.append("disturbance set W is empty")
            if not self.W.contains(np.zeros(self.W.dim), tol=1e-12):
                problems.append("disturbance set W does not contain the origin")
        if not problems and np.any(self.b < 0):
            # (0, 0) outside C: allowed, but the regulation problem is ill-posed
            warnings.warn("origin violates the stage constraints", stacklevel=2)
        return problems

    def check(self) -> "LinearSystem":
        problems = self.validate()
        if problems:
            raise ModelError("; ".join(problems))
        return self

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "A": self.A.tolist(), "B": self.B.tolist(), "Bw": self.Bw.tolist(),
            "F": self.F.tolist(), "G": self.G.tolist(), "b": self.b.tolist(),
            "W": self.W.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LinearSystem":
        nx = len(data["A"])
        return cls(
            A=np.asarray(data["A"], dtype=float),
            B=np.asarray(data["B"], dtype=float).reshape(nx, -1),
            Bw=np.asarray(data["Bw"], dtype=float).reshape(nx, -1),
            F=np.asarray(data["F"], dtype=float).reshape(-1, nx),
            G=np.asarray(data["G"], dtype=float).reshape(len(data["b"]), -1),
            b=np.asarray(data["b"], dtype=float),
            W=PolytopeH.from_dict(data["W"]),
            name=data.get("name", "system"),
        )


@dataclass(frozen=True, eq=False)
class CostWeights:
    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        Q, R = _mat(self.Q), _mat(self.R)
        for name, M in (("Q", Q), ("R", R)):
            if M.shape[0] != M.shape[1] or np.abs(M - M.T).max() > 1e-10:
                raise ModelError(f"{name} must be symmetric")
        if np.linalg.eigvalsh(Q).min() < -1e-10:
            raise ModelError("Q must be positive semidefinite")
        if np.linalg.eigvalsh(R).min() <= 0:
            raise ModelError("R must be positive definite")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)

    @classmethod
    def identity(cls, nx: int, nu: int) -> "CostWeights":
        return cls(np.eye(nx), np.eye(nu))

    def stage_cost(self, x, u) -> float:
        return float(x @ self.Q @ x + u @ self.R @ u)

    def to_dict(self) -> dict:
        return {"Q": self.Q.tolist(), "R": self.R.tolist()}
