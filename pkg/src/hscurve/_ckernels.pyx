# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the closest-point search and double-reflection recursion."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sin, cos, sqrt, fabs, fmod, M_PI, INFINITY

cnp.import_array()


cdef void _eval3(double u, const double[:, ::1] A, const double[:, ::1] B,
                 double* g0, double* g1, double* g2) noexcept nogil:
    cdef Py_ssize_t N = A.shape[0], K = A.shape[1], d, k
    cdef double c, s, kk
    for d in range(N):
        g0[d] = 0.0
        g1[d] = 0.0
        g2[d] = 0.0
    for k in range(K):
        c = cos(k * u)
        s = sin(k * u)
        kk = <double>k
        for d in range(N):
            g0[d] += A[d, k] * c + B[d, k] * s
            g1[d] += kk * (-A[d, k] * s + B[d, k] * c)
            g2[d] += -kk * kk * (A[d, k] * c + B[d, k] * s)


cdef double _polish(const double[::1] y, double u, const double[:, ::1] A, const double[:, ::1] B,
                    double du_max, double* uout,
                    double* g0, double* g1, double* g2) noexcept nogil:
    cdef Py_ssize_t N = A.shape[0], d, it
    cdef double f, fp, nrm, step, dd
    for it in range(40):
        _eval3(u, A, B, g0, g1, g2)
        f = 0.0
        fp = 0.0
        nrm = 0.0
        for d in range(N):
            dd = g0[d] - y[d]
            f += dd * g1[d]
            fp += dd * g2[d]
            nrm += g1[d] * g1[d]
        fp += nrm
        if fp <= 0.0:
            fp = nrm
        step = f / fp
        if step > du_max:
            step = du_max
        elif step < -du_max:
            step = -du_max
        u -= step
        if fabs(step) < 1e-15:
            break
    _eval3(u, A, B, g0, g1, g2)
    f = 0.0
    for d in range(N):
        dd = g0[d] - y[d]
        f += dd * dd
    uout[0] = u
    return sqrt(f)


def closest_points(points, cos_c, sin_c, u_samples, samples, chunk=None):
    cdef const double[:, ::1] P = np.ascontiguousarray(np.atleast_2d(points), dtype=float)
    cdef const double[:, ::1] A = np.ascontiguousarray(cos_c, dtype=float)
    cdef const double[:, ::1] B = np.ascontiguousarray(sin_c, dtype=float)
    cdef const double[::1] U = np.ascontiguousarray(u_samples, dtype=float)
    cdef const double[:, ::1] S = np.ascontiguousarray(samples, dtype=float)
    cdef Py_ssize_t n = P.shape[0], N = P.shape[1], m = S.shape[0]
    cdef Py_ssize_t i, j, d, i1, i2, sep
    cdef double best1, best2, d2, t, da, db, ua, ub
    cdef double du = 2 * M_PI / m
    dist = np.empty(n)
    upar = np.empty(n)
    cdef double[::1] dv = dist
    cdef double[::1] uv = upar
    cdef double[::1] g0 = np.empty(N)
    cdef double[::1] g1 = np.empty(N)
    cdef double[::1] g2 = np.empty(N)
    with nogil:
        for i in range(n):
            best1 = INFINITY
            i1 = 0
            for j in range(m):
                d2 = 0.0
                for d in range(N):
                    t = P[i, d] - S[j, d]
                    d2 += t * t
                if d2 < best1:
                    best1 = d2
                    i1 = j
            best2 = INFINITY
            i2 = 0
            for j in range(m):
                sep = j - i1 if j > i1 else i1 - j
                if m - sep < sep:
                    sep = m - sep
                if sep <= 2:
                    continue
                d2 = 0.0
                for d in range(N):
                    t = P[i, d] - S[j, d]
                    d2 += t * t
                if d2 < best2:
                    best2 = d2
                    i2 = j
            da = _polish(P[i], U[i1], A, B, du, &ua, &g0[0], &g1[0], &g2[0])
            db = _polish(P[i], U[i2], A, B, du, &ub, &g0[0], &g1[0], &g2[0])
            if db < da:
                da = db
                ua = ub
            dv[i] = da
            ua = fmod(ua, 2 * M_PI)
            if ua < 0:
                ua += 2 * M_PI
            uv[i] = ua
    return dist, upar


def double_reflection(x, tangents, r0):
    cdef const double[:, ::1] X = np.ascontiguousarray(x, dtype=float)
    cdef const double[:, ::1] T = np.ascontiguousarray(tangents, dtype=float)
    cdef Py_ssize_t n = X.shape[0], N = X.shape[1]
    r0 = np.ascontiguousarray(r0, dtype=float)
    cdef Py_ssize_t m = r0.shape[0]
    out = np.empty((n, m, N))
    cdef double[:, :, ::1] R = out
    cdef double[::1] v1 = np.empty(N)
    cdef double[::1] v2 = np.empty(N)
    cdef double[::1] tl = np.empty(N)
    cdef double[::1] rl = np.empty(N)
    cdef Py_ssize_t i, a, d
    cdef double c1, c2, p
    cdef const double[:, ::1] R0 = r0
    for a in range(m):
        for d in range(N):
            R[0, a, d] = R0[a, d]
    with nogil:
        for i in range(n - 1):
            c1 = 0.0
            for d in range(N):
                v1[d] = X[i + 1, d] - X[i, d]
                c1 += v1[d] * v1[d]
            p = 0.0
            for d in range(N):
                p += v1[d] * T[i, d]
            c2 = 0.0
            for d in range(N):
                tl[d] = T[i, d] - 2.0 / c1 * p * v1[d]
                v2[d] = T[i + 1, d] - tl[d]
                c2 += v2[d] * v2[d]
            for a in range(m):
                p = 0.0
                for d in range(N):
                    p += v1[d] * R[i, a, d]
                for d in range(N):
                    rl[d] = R[i, a, d] - 2.0 / c1 * p * v1[d]
                if c2 > 1e-300:
                    p = 0.0
                    for d in range(N):
                        p += v2[d] * rl[d]
                    for d in range(N):
                        R[i + 1, a, d] = rl[d] - 2.0 / c2 * p * v2[d]
                else:
                    for d in range(N):
                        R[i + 1, a, d] = rl[d]
    return out
