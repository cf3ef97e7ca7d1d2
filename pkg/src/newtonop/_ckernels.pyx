# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: banded LU, xoshiro256++ streams, cyclic Jacobi.

Every routine here has a numpy twin in ``_pykernels``; the dispatcher in
``kernels`` picks this module when it imports.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, sqrt
from libc.stdint cimport uint64_t

from newtonop.errors import SingularJacobianError as SingularMatrixError

cnp.import_array()


def band_lu_factor(double[:, ::1] work, Py_ssize_t kl, Py_ssize_t ku, double pivot_tol):
    """In-place LU with partial pivoting of a row-skewed band.

    ``work[i, c - i + kl]`` holds entry (i, c); rows are ``2*kl + ku + 1``
    wide so that fill from row interchanges stays inside the row.
    Returns (multipliers, pivots).
    """
    cdef Py_ssize_t n = work.shape[0]
    cdef Py_ssize_t span = kl + ku + 1
    cdef double[:, ::1] mult = np.zeros((n, kl + 1), dtype=np.float64)
    cdef Py_ssize_t[::1] piv = np.zeros(n, dtype=np.intp)
    cdef Py_ssize_t k, j, r, t, p, nr, off_p, off_r, last
    cdef double best, v, m, tmp, piv_val
    with nogil:
        for k in range(n):
            nr = kl
            if k + nr > n - 1:
                nr = n - 1 - k
            p = 0
            best = fabs(work[k, kl])
            for j in range(1, nr + 1):
                v = fabs(work[k + j, kl - j])
                if v > best:
                    best = v
                    p = j
            if best <= pivot_tol:
                with gil:
                    raise SingularMatrixError(f"pivot {best:.3e} at row {k}")
            piv[k] = k + p
            last = span
            if k + last > n:
                last = n - k
            if p != 0:
                off_p = kl - p
                for t in range(last):
                    tmp = work[k, kl + t]
                    work[k, kl + t] = work[k + p, off_p + t]
                    work[k + p, off_p + t] = tmp
            piv_val = work[k, kl]
            for j in range(1, nr + 1):
                r = k + j
                off_r = kl - j
                m = work[r, off_r] / piv_val
                mult[k, j] = m
                if m != 0.0:
                    for t in range(last):
                        work[r, off_r + t] -= m * work[k, kl + t]
    return np.asarray(mult), np.asarray(piv)


def band_lu_solve(const double[:, ::1] work, const double[:, ::1] mult,
                  const Py_ssize_t[::1] piv, Py_ssize_t kl, Py_ssize_t ku, rhs):
    cdef Py_ssize_t n = work.shape[0]
    cdef Py_ssize_t span = kl + ku + 1
    cdef double[::1] x = np.array(rhs, dtype=np.float64, copy=True)
    cdef Py_ssize_t k, j, t, p, nr, last
    cdef double tmp, acc
    with nogil:
        for k in range(n):
            p = piv[k]
            if p != k:
                tmp = x[k]
                x[k] = x[p]
                x[p] = tmp
            nr = kl
            if k + nr > n - 1:
                nr = n - 1 - k
            for j in range(1, nr + 1):
                x[k + j] -= mult[k, j] * x[k]
        for k in range(n - 1, -1, -1):
            last = span
            if k + last > n:
                last = n - k
            acc = x[k]
            for t in range(1, last):
                acc -= work[k, kl + t] * x[k + t]
            x[k] = acc / work[k, kl]
    return np.asarray(x)


cdef inline uint64_t _rotl(uint64_t x, int k) nogil:
    return (x << k) | (x >> (64 - k))


def xoshiro_fill(cnp.uint64_t[::1] state, Py_ssize_t count):
    """Advance a xoshiro256++ state ``count`` times; returns the outputs."""
    out_arr = np.empty(count, dtype=np.uint64)
    cdef cnp.uint64_t[::1] out = out_arr
    cdef uint64_t s0 = state[0], s1 = state[1], s2 = state[2], s3 = state[3]
    cdef uint64_t t
    cdef Py_ssize_t i
    with nogil:
        for i in range(count):
            out[i] = _rotl(s0 + s3, 23) + s0
            t = s1 << 17
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= t
            s3 = _rotl(s3, 45)
    state[0] = s0
    state[1] = s1
    state[2] = s2
    state[3] = s3
    return out_arr


def jacobi_eigh(a_in, double tol=1e-15, int max_sweeps=100):
    """Cyclic Jacobi eigen-decomposition of a symmetric matrix.

    Returns (eigenvalues, eigenvectors as columns), unsorted.
    """
    a_np = np.array(a_in, dtype=np.float64, copy=True, order="C")
    cdef double[:, ::1] a = a_np
    cdef Py_ssize_t n = a.shape[0]
    v_np = np.eye(n, dtype=np.float64)
    cdef double[:, ::1] v = v_np
    cdef Py_ssize_t p, q, i, sweep
    cdef double off, total, theta, t, c, s, app, aqq, apq, aip, aiq
    for sweep in range(max_sweeps):
        off = 0.0
        total = 0.0
        for p in range(n):
            total += a[p, p] * a[p, p]
            for q in range(p + 1, n):
                off += 2.0 * a[p, q] * a[p, q]
        total += off
        if off <= tol * tol * total or off == 0.0:
            break
        with nogil:
            for p in range(n - 1):
                for q in range(p + 1, n):
                    apq = a[p, q]
                    if apq == 0.0:
                        continue
                    app = a[p, p]
                    aqq = a[q, q]
                    theta = (aqq - app) / (2.0 * apq)
                    if theta >= 0.0:
                        t = 1.0 / (theta + sqrt(theta * theta + 1.0))
                    else:
                        t = -1.0 / (-theta + sqrt(theta * theta + 1.0))
                    c = 1.0 / sqrt(t * t + 1.0)
                    s = t * c
                    for i in range(n):
                        aip = a[i, p]
                        aiq = a[i, q]
                        a[i, p] = c * aip - s * aiq
                        a[i, q] = s * aip + c * aiq
                    for i in range(n):
                        aip = a[p, i]
                        aiq = a[q, i]
                        a[p, i] = c * aip - s * aiq
                        a[q, i] = s * aip + c * aiq
                    for i in range(n):
                        aip = v[i, p]
                        aiq = v[i, q]
                        v[i, p] = c * aip - s * aiq
                        v[i, q] = s * aip + c * aiq
    return np.diag(a_np).copy(), v_np
