# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled dual active-set (Goldfarb-Idnani) QP kernel.

Same contract and status codes as ``octmpc._qpkernel_py.solve_qp``.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs, INFINITY

cnp.import_array()

cdef enum:
    OPTIMAL = 0
    INFEASIBLE = 1
    MAX_ITER = 2


cdef inline void _rotate_cols(double[:, ::1] J, Py_ssize_t n, Py_ssize_t a, Py_ssize_t b,
                              double c, double s) noexcept nogil:
    cdef Py_ssize_t i
    cdef double ja, jb
    for i in range(n):
        ja = J[i, a]
        jb = J[i, b]
        J[i, a] = c * ja + s * jb
        J[i, b] = -s * ja + c * jb


cdef Py_ssize_t _drop(double[:, ::1] J, double[:, ::1] R, long[::1] active, char[::1] is_active,
                      double[::1] u, Py_ssize_t n, Py_ssize_t nact, Py_ssize_t k) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef double a, b, h, c, s, ra, rb
    is_active[active[k]] = 0
    for j in range(k, nact - 1):
        for i in range(n):
            R[i, j] = R[i, j + 1]
        active[j] = active[j + 1]
        u[j] = u[j + 1]
    u[nact - 1] = u[nact]
    u[nact] = 0.0
    for i in range(n):
        R[i, nact - 1] = 0.0
    nact -= 1
    for j in range(k, nact):
        a = R[j, j]
        b = R[j + 1, j]
        if b == 0.0:
            continue
        h = sqrt(a * a + b * b)
        c = a / h
        s = b / h
        for i in range(j, nact):
            ra = R[j, i]
            rb = R[j + 1, i]
            R[j, i] = c * ra + s * rb
            R[j + 1, i] = -s * ra + c * rb
        R[j, j] = h
        R[j + 1, j] = 0.0
        _rotate_cols(J, n, j, j + 1, c, s)
    return nact


def solve_qp(J0, q, C, h, double tol=1e-9, long max_iter=0):
    """Return ``(status, x, lam, iterations)``."""
    cdef double[:, ::1] J = np.array(J0, dtype=np.float64, order="C", copy=True)
    cdef double[::1] qv = np.ascontiguousarray(q, dtype=np.float64)
    cdef double[:, ::1] Cv = np.ascontiguousarray(C, dtype=np.float64)
    cdef double[::1] hv = np.ascontiguousarray(h, dtype=np.float64)
    cdef Py_ssize_t n = qv.shape[0]
    cdef Py_ssize_t m = hv.shape[0]
    if max_iter <= 0:
        max_iter = 50 * (n + m) + 100

    x_arr = np.zeros(n)
    cdef double[::1] x = x_arr
    cdef double[:, ::1] R = np.zeros((n, n))
    cdef long[::1] active = np.zeros(n, dtype=np.int_)
    cdef char[::1] is_active = np.zeros(m, dtype=np.int8)
    cdef double[::1] u = np.zeros(n + 1)
    cdef double[::1] d = np.zeros(n)
    cdef double[::1] z = np.zeros(n)
    cdef double[::1] r = np.zeros(n)
    cdef double[::1] tmp = np.zeros(n)
    cdef Py_ssize_t nact = 0, i, j, p, k
    cdef long iters = 0
    cdef int status = OPTIMAL
    cdef double acc, best, sl, t1, t2, step, zn, dd, ratio, c, s, hyp
    cdef double eps = 1e-14

    with nogil:
        # x = -J J^T q
        for j in range(n):
            acc = 0.0
            for i in range(n):
                acc = acc + J[i, j] * qv[i]
            tmp[j] = acc
        for i in range(n):
            acc = 0.0
            for j in range(n):
                acc = acc + J[i, j] * tmp[j]
            x[i] = -acc

        while True:
            if m == 0:
                break
            p = -1
            best = INFINITY
            for i in range(m):
                if is_active[i]:
                    continue
                acc = hv[i]
                for j in range(n):
                    acc = acc - Cv[i, j] * x[j]
                if acc < best:
                    best = acc
                    p = i
            if p < 0 or best >= -tol:
                break
            u[nact] = 0.0
            while True:
                iters += 1
                if iters > max_iter:
                    status = MAX_ITER
                    break
                # d = J^T n_p with n_p = -C[p]
                dd = 0.0
                for j in range(n):
                    acc = 0.0
                    for i in range(n):
                        acc = acc - J[i, j] * Cv[p, i]
                    d[j] = acc
                    dd = dd + acc * acc
                zn = 0.0
                for j in range(nact, n):
                    zn = zn + d[j] * d[j]
                for i in range(n):
                    acc = 0.0
                    for j in range(nact, n):
                        acc = acc + J[i, j] * d[j]
                    z[i] = acc
                for i in range(nact - 1, -1, -1):
                    acc = d[i]
                    for j in range(i + 1, nact):
                        acc = acc - R[i, j] * r[j]
                    r[i] = acc / R[i, i]
                t1 = INFINITY
                k = -1
                for j in range(nact):
                    if r[j] > eps:
                        ratio = (u[j] if u[j] > 0.0 else 0.0) / r[j]
                        if ratio < t1:
                            t1 = ratio
                            k = j
                if zn > eps * (dd if dd > 1.0 else 1.0):
                    sl = -hv[p]
                    for j in range(n):
                        sl = sl + Cv[p, j] * x[j]
                    t2 = sl / zn
                else:
                    t2 = INFINITY
                if t1 == INFINITY and t2 == INFINITY:
                    status = INFEASIBLE
                    break
                if t2 == INFINITY:
                    for j in range(nact):
                        u[j] = u[j] - t1 * r[j]
                    u[nact] = u[nact] + t1
                    nact = _drop(J, R, active, is_active, u, n, nact, k)
                    continue
                step = t1 if t1 < t2 else t2
                for i in range(n):
                    x[i] = x[i] + step * z[i]
                for j in range(nact):
                    u[j] = u[j] - step * r[j]
                u[nact] = u[nact] + step
                if t2 <= t1:
                    for j in range(n - 1, nact, -1):
                        if d[j] != 0.0:
                            hyp = sqrt(d[j - 1] * d[j - 1] + d[j] * d[j])
                            c = d[j - 1] / hyp
                            s = d[j] / hyp
                            d[j - 1] = hyp
                            d[j] = 0.0
                            _rotate_cols(J, n, j - 1, j, c, s)
                    for i in range(nact + 1):
                        R[i, nact] = d[i]
                    active[nact] = p
                    is_active[p] = 1
                    nact += 1
                    break
                nact = _drop(J, R, active, is_active, u, n, nact, k)
            if status != OPTIMAL:
                break

    lam = np.zeros(m)
    if status != INFEASIBLE:
        for j in range(nact):
            lam[active[j]] = u[j]
    return status, x_arr, lam, iters
