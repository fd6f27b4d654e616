"""Stacked horizon matrices and structured disturbance-feedback parameterizations.

Stacked vectors run over prediction steps ``0 .. N-1``. Stacked disturbances
have ``N`` blocks in the square convention (the last block affects nothing
inside the horizon) or ``N-1`` blocks in the short convention.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import LinearSystem


def _powers(A: np.ndarray, n: int) -> list[np.ndarray]:
    out = [np.eye(A.shape[0])]
    for _ in range(1, n):
        out.append(out[-1] @ A)
    return out


@dataclass(frozen=True, eq=False)
class PredictionMatrices:
    N: int
    C_xx: np.ndarray
    C_xu: np.ndarray
    C_xw: np.ndarray
    bold_Bw: np.ndarray
    bold_Bw_short: np.ndarray
    bold_F: np.ndarray
    bold_G: np.ndarray
    bold_b: np.ndarray
    bold_D: np.ndarray
    bold_d: np.ndarray
    A_N: np.ndarray
    C_Nu: np.ndarray

    def states(self, x0, u_hat, w=None, feedback: "DisturbanceFeedback | None" = None):
        """Stacked predicted states for stacked nominal inputs and (optionally) disturbances."""
        x = self.C_xx @ x0 + self.C_xu @ u_hat
        if w is not None:
            M = np.zeros((self.C_xu.shape[1], self.C_xw.shape[1])) if feedback is None else feedback.expand(self.N)
            x = x + (self.C_xw + self.C_xu @ M) @ self.bold_Bw @ w
        return x


def build_prediction(system: LinearSystem, N: int) -> PredictionMatrices:
    if N < 2:
        raise ValueError(f"horizon must be at least 2, got {N}")
    A, B, nx, nu = system.A, system.B, system.nx, system.nu
    P = _powers(A, N + 1)
    C_xx = np.vstack(P[:N])
    C_xu = np.zeros((N * nx, N * nu))
    C_xw = np.zeros((N * nx, N * nx))
    for i in range(1, N):
        for j in range(i):
            C_xu[i * nx:(i + 1) * nx, j * nu:(j + 1) * nu] = P[i - j - 1] @ B
            C_xw[i * nx:(i + 1) * nx, j * nx:(j + 1) * nx] = P[i - j - 1]
    C_Nu = np.hstack([P[N - 1 - j] @ B for j in range(N)])
    return PredictionMatrices(
        N=N,
        C_xx=C_xx,
        C_xu=C_xu,
        C_xw=C_xw,
        bold_Bw=np.kron(np.eye(N), system.Bw),
        bold_Bw_short=np.kron(np.eye(N - 1), system.Bw),
        bold_F=np.kron(np.eye(N), system.F),
        bold_G=np.kron(np.eye(N), system.G),
        bold_b=np.tile(system.b, N),
        bold_D=np.kron(np.eye(N - 1), system.D),
        bold_d=np.tile(system.d, N - 1),
        A_N=P[N],
        C_Nu=C_Nu,
    )


@dataclass(frozen=True, eq=False)
class DisturbanceFeedback:
    """Toeplitz disturbance-feedback gains ``M_1 .. M_{N-1}`` plus terminal block ``M_N``.

    Storing blocks rather than the full matrix makes the constant-diagonal
    structure hold by construction.
    """

    blocks: tuple[np.ndarray, ...]
    terminal: np.ndarray

    def __post_init__(self):
        blocks = tuple(np.atleast_2d(np.asarray(M, dtype=float)) for M in self.blocks)
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "terminal", np.atleast_2d(np.asarray(self.terminal, dtype=float)))

    @property
    def N(self) -> int:
        return len(self.blocks) + 1

    def block(self, i: int) -> np.ndarray:
        """``M_i`` for ``1 <= i <= N`` (``M_N`` is the terminal block)."""
        if i == self.N:
            return self.terminal
        return self.blocks[i - 1]

    def expand(self, N: int | None = None, square: bool = True) -> np.ndarray:
        """Strictly lower block-Toeplitz matrix with block ``(i, j) = M_{i-j}``."""
        N = self.N if N is None else N
        if N != self.N:
            raise ValueError(f"feedback has horizon {self.N}, requested {N}")
        nu, nx = self.terminal.shape
        cols = N if square else N - 1
        out = np.zeros((N * nu, cols * nx))
        for i in range(1, N):
            for j in range(min(i, cols)):
                out[i * nu:(i + 1) * nu, j * nx:(j + 1) * nx] = self.blocks[i - j - 1]
        return out

    @classmethod
    def from_matrix(cls, M_off: np.ndarray, nu: int, nx: int, terminal=None) -> "DisturbanceFeedback":
        N = M_off.shape[0] // nu
        blocks = tuple(M_off[i * nu:(i + 1) * nu, 0:nx].copy() for i in range(1, N))
        return cls(blocks, np.zeros((nu, nx)) if terminal is None else terminal)

    @classmethod
    def zeros(cls, N: int, nu: int, nx: int) -> "DisturbanceFeedback":
        return cls(tuple(np.zeros((nu, nx)) for _ in range(N - 1)), np.zeros((nu, nx)))

    @classmethod
    def from_state_feedback(cls, K, system: LinearSystem, N: int) -> "DisturbanceFeedback":
        """Embedding of a fixed tube gain: ``M_i = K (A+BK)^{i-1}``, ``M_N = K (A+BK)^{N-1}``."""
        K = np.atleast_2d(np.asarray(K, dtype=float))
        Acl = system.A + system.B @ K
        P = _powers(Acl, N)
        return cls(tuple(K @ P[i - 1] for i in range(1, N)), K @ P[N - 1])

    def to_dict(self) -> dict:
        return {"blocks": [M.tolist() for M in self.blocks], "terminal": self.terminal.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "DisturbanceFeedback":
        return cls(tuple(np.asarray(M, dtype=float) for M in data["blocks"]), np.asarray(data["terminal"], dtype=float))


@dataclass(frozen=True, eq=False)
class TmpcGain:
    K: np.ndarray

    def expand(self, system: LinearSystem, N: int) -> np.ndarray:
        return expand_tmpc_gain(self.K, system, N)


def expand_tmpc_gain(K, system: LinearSystem, N: int) -> np.ndarray:
    """Bold-K of tube MPC: block ``(i, j) = K (A+BK)^{i-j-1}`` for ``i > j``."""
    K = np.atleast_2d(np.asarray(K, dtype=float))
    if K.shape != (system.nu, system.nx):
        raise ValueError(f"K has shape {K.shape}, expected {(system.nu, system.nx)}")
    return DisturbanceFeedback.from_state_feedback(K, system, N).expand(N)


def phi_blocks(feedback: DisturbanceFeedback, system: LinearSystem, upto: int | None = None) -> list[np.ndarray]:
    """``Phi_m = sum_{j=0}^{m} A^j B M_{m-j}`` with ``B M_0 := I``, for ``m = 0 .. upto``.

    ``Phi_m B_w`` maps one disturbance to the state error ``m + 1`` steps later.
    Computed through ``Phi_m = A Phi_{m-1} + B M_m``.
    """
    upto = feedback.N if upto is None else upto
    out = [np.eye(system.nx)]
    for m in range(1, upto + 1):
        out.append(system.A @ out[-1] + system.B @ feedback.block(m))
    return out


def error_propagation_map(feedback: DisturbanceFeedback, system: LinearSystem, N: int | None = None) -> np.ndarray:
    """Matrix mapping ``(w_0 .. w_{N-2})`` to the state errors ``(e_0 .. e_{N-1})``.

    Block ``(i, l)`` is ``Phi_{i-1-l} B_w`` for ``l < i``; ``e_0`` is identically zero.
    """
    N = feedback.N if N is None else N
    if N != feedback.N:
        raise ValueError(f"feedback has horizon {feedback.N}, requested {N}")
    nx, nw = system.nx, system.nw
    Phi = phi_blocks(feedback, system, N - 1)
    out = np.zeros((N * nx, (N - 1) * nw))
    for i in range(1, N):
        for l in range(i):
            out[i * nx:(i + 1) * nx, l * nw:(l + 1) * nw] = Phi[i - 1 - l] @ system.Bw
    return out


def input_error_map(feedback: DisturbanceFeedback, system: LinearSystem) -> np.ndarray:
    """Matrix mapping ``(w_0 .. w_{N-2})`` to ``u_i - u_hat_i`` for ``i = 0 .. N-1``."""
    return feedback.expand(square=False) @ np.kron(np.eye(feedback.N - 1), system.Bw)


def simulate_errors(feedback: DisturbanceFeedback, system: LinearSystem, w: np.ndarray) -> np.ndarray:
    """Step-by-step error recursion ``e_{i+1} = A e_i + B sum_j M_{i-j} B_w w_j + B_w w_i``.

    Independent route to :func:`error_propagation_map`; ``w`` has shape ``(N-1, nw)``.
    """
    N = feedback.N
    e = [np.zeros(system.nx)]
    for i in range(N - 1):
        fb = sum((feedback.block(i - j) @ system.Bw @ w[j] for j in range(i)), np.zeros(system.nu))
        e.append(system.A @ e[-1] + system.B @ fb + system.Bw @ w[i])
    return np.concatenate(e)
