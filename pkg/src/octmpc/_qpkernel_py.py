"""Dual active-set (Goldfarb-Idnani) solver for small dense strictly convex QPs.

Pure-Python reference of the compiled kernel in ``_qpkernel.pyx``; both
expose the same ``solve_qp`` signature and status codes.

    minimize 1/2 x^T H x + q^T x   subject to   C x <= h

``J0 = L^{-T}`` for the Cholesky factor ``H = L L^T``. Rows of ``C`` must be
nonzero (ideally unit norm, since ``tol`` is an absolute slack tolerance).
"""
import math

import numpy as np

OPTIMAL = 0
INFEASIBLE = 1
MAX_ITER = 2


def _givens(a, b):
    h = math.hypot(a, b)
    return a / h, b / h, h


def solve_qp(J0, q, C, h, tol=1e-9, max_iter=0):
    """Return ``(status, x, lam, iterations)``; ``lam`` are the inequality multipliers."""
    J = np.array(J0, dtype=float, copy=True)
    q = np.asarray(q, dtype=float)
    C = np.asarray(C, dtype=float)
    h = np.asarray(h, dtype=float)
    n = q.shape[0]
    m = h.shape[0]
    if max_iter <= 0:
        max_iter = 50 * (n + m) + 100
    x = -(J @ (J.T @ q))
    R = np.zeros((n, n))
    active = np.zeros(n, dtype=np.int64)
    is_active = np.zeros(m, dtype=bool)
    u = np.zeros(n + 1)
    nact = 0
    iters = 0
    eps = 1e-14

    while True:
        slack = h - C @ x
        slack[is_active] = np.inf
        if m == 0:
            break
        p = int(np.argmin(slack))
        if slack[p] >= -tol:
            break
        normal = -C[p]
        u[nact] = 0.0
        while True:
            iters += 1
            if iters > max_iter:
                lam = np.zeros(m)
                lam[active[:nact]] = u[:nact]
                return MAX_ITER, x, lam, iters
            d = J.T @ normal
            z = J[:, nact:] @ d[nact:]
            r = np.zeros(nact)
            for i in range(nact - 1, -1, -1):
                r[i] = (d[i] - R[i, i + 1:nact] @ r[i + 1:nact]) / R[i, i]
            t1 = math.inf
            k = -1
            for j in range(nact):
                if r[j] > eps:
                    ratio = max(u[j], 0.0) / r[j]
                    if ratio < t1:
                        t1 = ratio
                        k = j
            zn = float(d[nact:] @ d[nact:])
            if zn > eps * max(1.0, float(d @ d)):
                t2 = (C[p] @ x - h[p]) / zn
            else:
                t2 = math.inf
            if t1 == math.inf and t2 == math.inf:
                return INFEASIBLE, x, np.zeros(m), iters
            if t2 == math.inf:
                u[:nact] -= t1 * r
                u[nact] += t1
                nact = _drop(J, R, active, is_active, u, nact, k)
                continue
            step = min(t1, t2)
            x = x + step * z
            u[:nact] -= step * r
            u[nact] += step
            if t2 <= t1:
                # add p: rotate d so only entries 0..nact survive
                for j in range(n - 1, nact, -1):
                    if d[j] != 0.0:
                        c, s, hyp = _givens(d[j - 1], d[j])
                        d[j - 1] = hyp
                        d[j] = 0.0
                        Jj1 = J[:, j - 1].copy()
                        J[:, j - 1] = c * Jj1 + s * J[:, j]
                        J[:, j] = -s * Jj1 + c * J[:, j]
                R[:nact + 1, nact] = d[:nact + 1]
                active[nact] = p
                is_active[p] = True
                nact += 1
                break
            nact = _drop(J, R, active, is_active, u, nact, k)

    lam = np.zeros(m)
    lam[active[:nact]] = u[:nact]
    return OPTIMAL, x, lam, iters


def _drop(J, R, active, is_active, u, nact, k):
    is_active[active[k]] = False
    for j in range(k, nact - 1):
        R[:, j] = R[:, j + 1]
        active[j] = active[j + 1]
        u[j] = u[j + 1]
    u[nact - 1] = u[nact]
    u[nact] = 0.0
    R[:, nact - 1] = 0.0
    nact -= 1
    for j in range(k, nact):
        a, b = R[j, j], R[j + 1, j]
        if b == 0.0:
            continue
        c, s, hyp = _givens(a, b)
        Rj = R[j, j:nact].copy()
        R[j, j:nact] = c * Rj + s * R[j + 1, j:nact]
        R[j + 1, j:nact] = -s * Rj + c * R[j + 1, j:nact]
        R[j, j] = hyp
        R[j + 1, j] = 0.0
        Jj = J[:, j].copy()
        J[:, j] = c * Jj + s * J[:, j + 1]
        J[:, j + 1] = -s * Jj + c * J[:, j + 1]
    return nact
