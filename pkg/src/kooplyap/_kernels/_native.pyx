# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: monomial evaluation, jacobians, polynomial fields, RK4."""

from libc.stdlib cimport free, malloc

import numpy as np

cimport numpy as cnp

cnp.import_array()


cdef inline int _max_degree(const int[:, ::1] exps) noexcept nogil:
    cdef Py_ssize_t k, j
    cdef int d = 0
    for k in range(exps.shape[0]):
        for j in range(exps.shape[1]):
            if exps[k, j] > d:
                d = exps[k, j]
    return d


cdef void _fill_powers(const double* x, Py_ssize_t n, int dmax, double* pw) noexcept nogil:
    # pw laid out as (n, dmax+1)
    cdef Py_ssize_t j
    cdef int k
    for j in range(n):
        pw[j * (dmax + 1)] = 1.0
        for k in range(1, dmax + 1):
            pw[j * (dmax + 1) + k] = pw[j * (dmax + 1) + k - 1] * x[j]


def monomial_values(const double[:, ::1] points, const int[:, ::1] exps):
    cdef Py_ssize_t b = points.shape[0]
    cdef Py_ssize_t n = points.shape[1]
    cdef Py_ssize_t m = exps.shape[0]
    cdef int dmax = _max_degree(exps)
    out_arr = np.empty((b, m))
    cdef double[:, ::1] out = out_arr
    cdef double* pw = <double*> malloc(n * (dmax + 1) * sizeof(double))
    if pw == NULL:
        raise MemoryError()
    cdef Py_ssize_t i, k, j
    cdef double v
    cdef int e
    try:
        with nogil:
            for i in range(b):
                _fill_powers(&points[i, 0], n, dmax, pw)
                for k in range(m):
                    v = 1.0
                    for j in range(n):
                        e = exps[k, j]
                        if e:
                            v *= pw[j * (dmax + 1) + e]
                    out[i, k] = v
    finally:
        free(pw)
    return out_arr


def monomial_jacobian(const double[:, ::1] points, const int[:, ::1] exps):
    cdef Py_ssize_t b = points.shape[0]
    cdef Py_ssize_t n = points.shape[1]
    cdef Py_ssize_t m = exps.shape[0]
    cdef int dmax = _max_degree(exps)
    out_arr = np.empty((b, m, n))
    cdef double[:, :, ::1] out = out_arr
    cdef double* pw = <double*> malloc(n * (dmax + 1) * sizeof(double))
    cdef double* lp = <double*> malloc((n + 1) * sizeof(double))
    cdef double* rp = <double*> malloc((n + 1) * sizeof(double))
    if pw == NULL or lp == NULL or rp == NULL:
        free(pw); free(lp); free(rp)
        raise MemoryError()
    cdef Py_ssize_t i, k, j
    cdef int e
    try:
        with nogil:
            for i in range(b):
                _fill_powers(&points[i, 0], n, dmax, pw)
                for k in range(m):
                    lp[0] = 1.0
                    for j in range(n):
                        lp[j + 1] = lp[j] * pw[j * (dmax + 1) + exps[k, j]]
                    rp[n] = 1.0
                    for j in range(n - 1, -1, -1):
                        rp[j] = rp[j + 1] * pw[j * (dmax + 1) + exps[k, j]]
                    for j in range(n):
                        e = exps[k, j]
                        if e == 0:
                            out[i, k, j] = 0.0
                        else:
                            out[i, k, j] = lp[j] * rp[j + 1] * e * pw[j * (dmax + 1) + e - 1]
    finally:
        free(pw); free(lp); free(rp)
    return out_arr


cdef void _field_eval(const double* x, Py_ssize_t n,
                      const double[::1] coeffs, const int[:, ::1] exps,
                      const long long[::1] offsets, int dmax,
                      double* pw, double* fx) noexcept nogil:
    cdef Py_ssize_t c, t, j
    cdef double acc, v
    cdef int e
    _fill_powers(x, n, dmax, pw)
    for c in range(offsets.shape[0] - 1):
        acc = 0.0
        for t in range(offsets[c], offsets[c + 1]):
            v = coeffs[t]
            for j in range(n):
                e = exps[t, j]
                if e:
                    v *= pw[j * (dmax + 1) + e]
            acc += v
        fx[c] = acc


def poly_eval(const double[:, ::1] points, const double[::1] coeffs,
              const int[:, ::1] exps, const long long[::1] offsets):
    cdef Py_ssize_t b = points.shape[0]
    cdef Py_ssize_t n = points.shape[1]
    cdef Py_ssize_t n_out = offsets.shape[0] - 1
    cdef int dmax = _max_degree(exps)
    out_arr = np.empty((b, n_out))
    cdef double[:, ::1] out = out_arr
    cdef double* pw = <double*> malloc(n * (dmax + 1) * sizeof(double))
    if pw == NULL:
        raise MemoryError()
    cdef Py_ssize_t i
    try:
        with nogil:
            for i in range(b):
                _field_eval(&points[i, 0], n, coeffs, exps, offsets, dmax, pw, &out[i, 0])
    finally:
        free(pw)
    return out_arr


def rk4_rollout(const double[::1] coeffs, const int[:, ::1] exps,
                const long long[::1] offsets, const double[:, ::1] x0,
                double dt, Py_ssize_t steps, double guard):
    cdef Py_ssize_t b = x0.shape[0]
    cdef Py_ssize_t n = x0.shape[1]
    cdef int dmax = _max_degree(exps)
    out_arr = np.empty((b, steps + 1, n))
    div_arr = np.full(b, -1, dtype=np.int64)
    cdef double[:, :, ::1] out = out_arr
    cdef long long[::1] diverged = div_arr
    cdef double* pw = <double*> malloc(n * (dmax + 1) * sizeof(double))
    cdef double* work = <double*> malloc(6 * n * sizeof(double))
    if pw == NULL or work == NULL:
        free(pw); free(work)
        raise MemoryError()
    cdef double* x = work
    cdef double* xt = work + n
    cdef double* k1 = work + 2 * n
    cdef double* k2 = work + 3 * n
    cdef double* k3 = work + 4 * n
    cdef double* k4 = work + 5 * n
    cdef Py_ssize_t i, s, j
    cdef double half = 0.5 * dt, sixth = dt / 6.0
    cdef double xn
    cdef bint bad
    try:
        with nogil:
            for i in range(b):
                for j in range(n):
                    x[j] = x0[i, j]
                    out[i, 0, j] = x[j]
                for s in range(steps):
                    _field_eval(x, n, coeffs, exps, offsets, dmax, pw, k1)
                    for j in range(n):
                        xt[j] = x[j] + half * k1[j]
                    _field_eval(xt, n, coeffs, exps, offsets, dmax, pw, k2)
                    for j in range(n):
                        xt[j] = x[j] + half * k2[j]
                    _field_eval(xt, n, coeffs, exps, offsets, dmax, pw, k3)
                    for j in range(n):
                        xt[j] = x[j] + dt * k3[j]
                    _field_eval(xt, n, coeffs, exps, offsets, dmax, pw, k4)
                    bad = False
                    for j in range(n):
                        xn = x[j] + sixth * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])
                        xt[j] = xn
                        if not (xn == xn) or xn > guard or xn < -guard:
                            bad = True
                    if bad:
                        diverged[i] = s
                        break
                    for j in range(n):
                        x[j] = xt[j]
                        out[i, s + 1, j] = x[j]
                if diverged[i] >= 0:
                    # freeze: remaining rows repeat the last admissible state
                    for s in range(diverged[i] + 1, steps + 1):
                        for j in range(n):
                            out[i, s, j] = x[j]
    finally:
        free(pw); free(work)
    return out_arr, div_arr
