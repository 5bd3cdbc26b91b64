# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: fixed-order matmul and the decayed linear-attention scan.

Every sum runs in ascending index order starting from 0.0, with no fused
multiply-add, so results are bit-identical to ``_fallback``.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport frexp, ldexp, rint, isfinite, fabs, INFINITY

cnp.import_array()

cdef double BF16_MAX = 3.3895313892515355e38


cdef inline double _bf16(double x) nogil:
    cdef int e
    cdef double q, y
    if not isfinite(x):
        return x
    frexp(x, &e)
    if e < -125:
        e = -125
    q = ldexp(1.0, e - 8)
    y = rint(x / q) * q
    if fabs(y) > BF16_MAX:
        return INFINITY if y > 0 else -INFINITY
    return y


def matmul(const double[:, ::1] a, const double[:, ::1] b):
    cdef Py_ssize_t n = a.shape[0], m = a.shape[1], p = b.shape[1]
    cdef Py_ssize_t i, k, j
    cdef double aik
    out = np.zeros((n, p), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for i in range(n):
            for k in range(m):
                aik = a[i, k]
                for j in range(p):
                    o[i, j] = o[i, j] + aik * b[k, j]
    return out


def decay_scan(const double[:, ::1] q, const double[:, ::1] k, const double[:, ::1] v,
               double lam, const double[:, ::1] kv0, bint round_state):
    """Run kv_t = lam*kv_{t-1} + k_t^T v_t, o_t = q_t kv_t over all rows.

    Returns ``(outputs, kv_final)``; ``kv0`` is not modified.
    """
    cdef Py_ssize_t n = q.shape[0], dk = q.shape[1], dv = v.shape[1]
    cdef Py_ssize_t t, i, j
    cdef double qi, ki
    out = np.zeros((n, dv), dtype=np.float64)
    state = np.array(kv0, dtype=np.float64, copy=True, order="C")
    cdef double[:, ::1] o = out
    cdef double[:, ::1] s = state
    with nogil:
        for t in range(n):
            for i in range(dk):
                ki = k[t, i]
                for j in range(dv):
                    s[i, j] = lam * s[i, j] + ki * v[t, j]
                    if round_state:
                        s[i, j] = _bf16(s[i, j])
            for i in range(dk):
                qi = q[t, i]
                for j in range(dv):
                    o[t, j] = o[t, j] + qi * s[i, j]
    return out, state


def round_bf16(const double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for i in range(n):
            for j in range(m):
                o[i, j] = _bf16(x[i, j])
    return out
