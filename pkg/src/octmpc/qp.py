"""Dense QP kernel selection.

The compiled Goldfarb-Idnani kernel (``octmpc._qpkernel``) is used when it
was built; otherwise the pure-Python reference takes over. Setting
``OCTMPC_PURE_PYTHON=1`` forces the fallback.
"""
from __future__ import annotations

import os

import numpy as np
import scipy.linalg

from ._qpkernel_py import INFEASIBLE, MAX_ITER, OPTIMAL
from ._qpkernel_py import solve_qp as solve_qp_python

try:
    if os.environ.get("OCTMPC_PURE_PYTHON") == "1":
        raise ImportError("pure Python kernel requested")
    from ._qpkernel import solve_qp as solve_qp_compiled
except ImportError:
    solve_qp_compiled = None

KERNEL = "python" if solve_qp_compiled is None else "compiled"
solve_qp = solve_qp_python if solve_qp_compiled is None else solve_qp_compiled

STATUS_NAMES = {OPTIMAL: "optimal", INFEASIBLE: "infeasible", MAX_ITER: "numerical-failure"}


def inverse_cholesky_factor(H) -> np.ndarray:
    """``J0 = L^{-T}`` with ``H = L L^T``; the kernel's representation of ``H^{-1} = J0 J0^T``."""
    L = np.linalg.cholesky(np.asarray(H, dtype=float))
    return scipy.linalg.solve_triangular(L, np.eye(L.shape[0]), lower=True).T.copy()


def get_solver(kernel: str | None = None):
    if kernel in (None, "auto"):
        return solve_qp
    if kernel == "python":
        return solve_qp_python
    if kernel == "compiled":
        if solve_qp_compiled is None:
            raise RuntimeError("compiled QP kernel is not available in this installation")
        return solve_qp_compiled
    raise ValueError(f"unknown kernel {kernel!r}")
