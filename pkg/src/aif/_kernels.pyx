# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops. Must stay bit-identical to ``aif._fallback``."""
import numpy as np

cimport numpy as cnp

cnp.import_array()


def matmul_nt(const float[:, ::1] a, const float[:, ::1] bt):
    """Return ``a @ bt.T`` as float32 with float64 accumulation over k in order."""
    cdef Py_ssize_t m = a.shape[0]
    cdef Py_ssize_t k = a.shape[1]
    cdef Py_ssize_t n = bt.shape[0]
    cdef Py_ssize_t i, j, p
    cdef double acc, acc1, acc2, acc3, x
    out = np.empty((m, n), dtype=np.float32)
    if m == 0 or n == 0:
        return out
    cdef float[:, ::1] o = out
    cdef Py_ssize_t n4 = n - n % 4
    with nogil:
        for i in range(m):
            # four independent columns per pass; each keeps its own k order
            for j in range(0, n4, 4):
                acc = 0.0
                acc1 = 0.0
                acc2 = 0.0
                acc3 = 0.0
                for p in range(k):
                    x = <double>a[i, p]
                    acc = acc + x * <double>bt[j, p]
                    acc1 = acc1 + x * <double>bt[j + 1, p]
                    acc2 = acc2 + x * <double>bt[j + 2, p]
                    acc3 = acc3 + x * <double>bt[j + 3, p]
                o[i, j] = <float>acc
                o[i, j + 1] = <float>acc1
                o[i, j + 2] = <float>acc2
                o[i, j + 3] = <float>acc3
            for j in range(n4, n):
                acc = 0.0
                for p in range(k):
                    acc = acc + <double>a[i, p] * <double>bt[j, p]
                o[i, j] = <float>acc
    return out


def similarity_matrix(const cnp.uint8_t[:, ::1] a, const cnp.uint8_t[:, ::1] b,
                      const cnp.uint8_t[::1] lut, Py_ssize_t nbits):
    """XNOR-popcount similarity between every row of ``a`` and every row of ``b``."""
    cdef Py_ssize_t m = a.shape[0]
    cdef Py_ssize_t n = b.shape[0]
    cdef Py_ssize_t nbytes = a.shape[1]
    cdef Py_ssize_t i, j, p
    cdef long count
    cdef double inv = 1.0 / <double>nbits
    out = np.empty((m, n), dtype=np.float32)
    if m == 0 or n == 0:
        return out
    cdef float[:, ::1] o = out
    with nogil:
        for i in range(m):
            for j in range(n):
                count = 0
                for p in range(nbytes):
                    count = count + lut[255 - (a[i, p] ^ b[j, p])]
                o[i, j] = <float>(<double>count * inv)
    return out


def simtier_counts(const float[:, ::1] sims, Py_ssize_t n_tiers):
    """Histogram each row of ``sims`` into ``n_tiers`` uniform tiers on [0, 1]."""
    cdef Py_ssize_t m = sims.shape[0]
    cdef Py_ssize_t n = sims.shape[1]
    cdef Py_ssize_t i, j, t
    cdef double s
    cdef double nt = <double>n_tiers
    out = np.zeros((m, n_tiers), dtype=np.int64)
    if m == 0 or n == 0:
        return out
    cdef cnp.int64_t[:, ::1] o = out
    with nogil:
        for i in range(m):
            for j in range(n):
                s = <double>sims[i, j]
                t = <Py_ssize_t>(s * nt)
                # float rounding of s * N can land one tier off the exact boundary test
                if t < n_tiers and s >= <double>(t + 1) / nt:
                    t = t + 1
                if t > 0 and s < <double>t / nt:
                    t = t - 1
                if t >= n_tiers:
                    t = n_tiers - 1
                o[i, t] += 1
    return out
