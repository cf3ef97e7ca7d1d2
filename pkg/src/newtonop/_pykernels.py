"""Pure-Python/numpy twins of the compiled kernels in ``_ckernels``.

Same algorithms and pivot choices; the xoshiro streams agree bit for bit,
the floating-point kernels agree to rounding (dot products are reordered).
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided

_MASK64 = 0xFFFFFFFFFFFFFFFF


from newtonop.errors import SingularJacobianError as SingularMatrixError


def _skew(work, k, kl, nr, last):
    """View of rows k+1..k+nr, each starting at column k (skewed strides)."""
    rs, cs = work.strides
    base = work[k + 1:, kl - 1:]
    return as_strided(base, shape=(nr, last), strides=(rs - cs, cs), writeable=True)


def band_lu_factor(work, kl, ku, pivot_tol):
    n = work.shape[0]
    span = kl + ku + 1
    mult = np.zeros((n, kl + 1))
    piv = np.zeros(n, dtype=np.intp)
    cand = np.arange(kl + 1)
    for k in range(n):
        nr = min(kl, n - 1 - k)
        col = np.abs(work[k + cand[: nr + 1], kl - cand[: nr + 1]])
        p = int(np.argmax(col))
        best = col[p]
        if best <= pivot_tol:
            raise SingularMatrixError(f"pivot {best:.3e} at row {k}")
        piv[k] = k + p
        last = min(span, n - k)
        if p != 0:
            off_p = kl - p
            tmp = work[k, kl:kl + last].copy()
            work[k, kl:kl + last] = work[k + p, off_p:off_p + last]
            work[k + p, off_p:off_p + last] = tmp
        if nr == 0:
            continue
        rows = _skew(work, k, kl, nr, last)
        m = rows[:, 0] / work[k, kl]
        mult[k, 1:nr + 1] = m
        rows -= m[:, None] * work[k, kl:kl + last][None, :]
    return mult, piv


def band_lu_solve(work, mult, piv, kl, ku, rhs):
    n = work.shape[0]
    span = kl + ku + 1
    x = np.array(rhs, dtype=np.float64, copy=True)
    for k in range(n):
        p = piv[k]
        if p != k:
            x[k], x[p] = x[p], x[k]
        nr = min(kl, n - 1 - k)
        if nr:
            x[k + 1:k + 1 + nr] -= mult[k, 1:nr + 1] * x[k]
    for k in range(n - 1, -1, -1):
        last = min(span, n - k)
        acc = x[k] - np.dot(work[k, kl + 1:kl + last], x[k + 1:k + last])
        x[k] = acc / work[k, kl]
    return x


def _rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & _MASK64


def xoshiro_fill(state, count):
    s0, s1, s2, s3 = (int(v) for v in state)
    out = np.empty(count, dtype=np.uint64)
    for i in range(count):
        out[i] = (_rotl((s0 + s3) & _MASK64, 23) + s0) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
    state[:] = np.array([s0, s1, s2, s3], dtype=np.uint64)
    return out


def jacobi_eigh(a_in, tol=1e-15, max_sweeps=100):
    a = np.array(a_in, dtype=np.float64, copy=True, order="C")
    n = a.shape[0]
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = 0.0
        total = 0.0
        for p in range(n):
            total += a[p, p] * a[p, p]
            for q in range(p + 1, n):
                off += 2.0 * a[p, q] * a[p, q]
        total += off
        if off <= tol * tol * total or off == 0.0:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                app = a[p, p]
                aqq = a[q, q]
                theta = (aqq - app) / (2.0 * apq)
                if theta >= 0.0:
                    t = 1.0 / (theta + np.sqrt(theta * theta + 1.0))
                else:
                    t = -1.0 / (-theta + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                for m in (a, v):
                    cp = m[:, p].copy()
                    cq = m[:, q].copy()
                    m[:, p] = c * cp - s * cq
                    m[:, q] = s * cp + c * cq
                    if m is a:
                        rp = a[p, :].copy()
                        rq = a[q, :].copy()
                        a[p, :] = c * rp - s * rq
                        a[q, :] = s * rp + c * rq
    return np.diag(a).copy(), v
