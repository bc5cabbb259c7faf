# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the hot loops in _kernels_py.

Each function reproduces the fallback's floating-point operation order.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def lag_sum(const double[:, :, ::1] values, const long long[:, ::1] src,
            const double[:, :, :, ::1] weights):
    cdef Py_ssize_t P = values.shape[0]
    cdef Py_ssize_t J = weights.shape[0]
    cdef Py_ssize_t n_out = weights.shape[1]
    cdef Py_ssize_t dout = weights.shape[2]
    cdef Py_ssize_t din = weights.shape[3]
    out_arr = np.zeros((P, n_out, dout))
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t p, k, j, a, b
    cdef long long s
    cdef double acc
    with nogil:
        for p in range(P):
            for k in range(n_out):
                for a in range(dout):
                    acc = 0.0
                    for j in range(J):
                        s = src[j, k]
                        if s < 0:
                            continue
                        for b in range(din):
                            acc = acc + weights[j, k, a, b] * values[p, s, b]
                    out[p, k, a] = acc
    return out_arr


def euler_linear(double[:, :, ::1] X, Py_ssize_t i0, Py_ssize_t n_steps, double dt,
                 const long long[::1] offA, const double[:, :, :, ::1] WA,
                 const long long[::1] offC, const double[:, :, :, ::1] WC,
                 const double[:, :, ::1] drift_add, const double[:, :, :, ::1] diff_add,
                 const double[:, :, ::1] dW, double guard):
    cdef Py_ssize_t P = X.shape[0]
    cdef Py_ssize_t d = X.shape[2]
    cdef Py_ssize_t m = dW.shape[2]
    cdef Py_ssize_t JA = offA.shape[0]
    cdef Py_ssize_t JC = offC.shape[0]
    cdef bint bcast_b = drift_add.shape[0] == 1
    cdef bint bcast_s = diff_add.shape[0] == 1
    cdef Py_ssize_t p, k, a, b, c, j, cur, pb, ps
    cdef double acc, nxt
    cdef Py_ssize_t failed = -1
    cdef Py_ssize_t first_fail = n_steps
    with nogil:
        for p in range(P):
            pb = 0 if bcast_b else p
            ps = 0 if bcast_s else p
            for k in range(n_steps):
                cur = i0 + k
                for a in range(d):
                    acc = 0.0
                    for j in range(JA):
                        for b in range(d):
                            acc = acc + WA[j, k, a, b] * X[p, cur - offA[j], b]
                    acc = acc + drift_add[pb, k, a]
                    nxt = X[p, cur, a] + acc * dt
                    for c in range(m):
                        acc = 0.0
                        for j in range(JC):
                            for b in range(d):
                                acc = acc + WC[j, k, a * m + c, b] * X[p, cur - offC[j], b]
                        acc = acc + diff_add[ps, k, a, c]
                        nxt = nxt + acc * dW[p, k, c]
                    X[p, cur + 1, a] = nxt
                    if not (nxt <= guard and nxt >= -guard):
                        if k < first_fail:
                            first_fail = k
                        failed = 1
                if failed == 1 and k >= first_fail:
                    break
    if failed == 1:
        return int(first_fail)
    return -1
