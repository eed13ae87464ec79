# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops of HRV accumulation.

Each call handles one (timestep, head) cell: logits, row softmax,
column accumulation, segment collapse and argmax, without allocating
the R^2 x N' map.
"""

from libc.math cimport exp, fabs
from libc.stdlib cimport malloc, free


cdef inline double _dot(const double *a, const double *b, Py_ssize_t n) noexcept nogil:
    # four accumulators break the add dependency chain
    cdef double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0
    cdef Py_ssize_t f = 0
    while f + 4 <= n:
        s0 += a[f] * b[f]
        s1 += a[f + 1] * b[f + 1]
        s2 += a[f + 2] * b[f + 2]
        s3 += a[f + 3] * b[f + 3]
        f += 4
    while f < n:
        s0 += a[f] * b[f]
        f += 1
    return (s0 + s1) + (s2 + s3)


cdef inline void _row_logits(const double *q, const double *K, Py_ssize_t ncols, Py_ssize_t n,
                             double scale, double *out) noexcept nogil:
    # four key rows per pass so each query entry is loaded once
    cdef Py_ssize_t j = 0, f
    cdef double s0, s1, s2, s3, x
    cdef const double *k0
    cdef const double *k1
    cdef const double *k2
    cdef const double *k3
    while j + 4 <= ncols:
        k0 = K + j * n
        k1 = k0 + n
        k2 = k1 + n
        k3 = k2 + n
        s0 = s1 = s2 = s3 = 0.0
        for f in range(n):
            x = q[f]
            s0 += x * k0[f]
            s1 += x * k1[f]
            s2 += x * k2[f]
            s3 += x * k3[f]
        out[j] = s0 * scale
        out[j + 1] = s1 * scale
        out[j + 2] = s2 * scale
        out[j + 3] = s3 * scale
        j += 4
    while j < ncols:
        out[j] = _dot(q, K + j * n, n) * scale
        j += 1


def fused_select(const double[:, ::1] Q, const double[:, ::1] K,
                 const long long[::1] bounds, double scale):
    cdef Py_ssize_t rows = Q.shape[0], feat = Q.shape[1], ncols = K.shape[0]
    cdef Py_ssize_t nseg = bounds.shape[0] - 1
    cdef Py_ssize_t i, j, s
    cdef double acc, mx, tot, best, strength
    cdef Py_ssize_t best_idx = 0
    if K.shape[1] != feat:
        raise ValueError("Q and K feature dimensions differ")
    if nseg < 1 or bounds[nseg] != ncols:
        raise ValueError("segments must cover all key rows")
    cdef double *logit = <double *> malloc(ncols * sizeof(double))
    cdef double *colsum = <double *> malloc(ncols * sizeof(double))
    if logit == NULL or colsum == NULL:
        free(logit)
        free(colsum)
        raise MemoryError()
    with nogil:
        for j in range(ncols):
            colsum[j] = 0.0
        for i in range(rows):
            _row_logits(&Q[i, 0], &K[0, 0], ncols, feat, scale, logit)
            mx = logit[0]
            for j in range(1, ncols):
                if logit[j] > mx:
                    mx = logit[j]
            tot = 0.0
            for j in range(ncols):
                logit[j] = exp(logit[j] - mx)
                tot = tot + logit[j]
            for j in range(ncols):
                colsum[j] = colsum[j] + logit[j] / tot
        best = -1e308
        for s in range(nseg):
            acc = 0.0
            for j in range(bounds[s], bounds[s + 1]):
                acc = acc + colsum[j]
            strength = acc / (bounds[s + 1] - bounds[s]) / rows
            if strength > best:
                best = strength
                best_idx = s
    free(logit)
    free(colsum)
    return best_idx


def logit_abs_mean(const double[:, ::1] Q, const double[:, ::1] K, double scale):
    cdef Py_ssize_t rows = Q.shape[0], feat = Q.shape[1], ncols = K.shape[0]
    cdef Py_ssize_t i, j
    cdef double total = 0.0
    if K.shape[1] != feat:
        raise ValueError("Q and K feature dimensions differ")
    with nogil:
        for i in range(rows):
            for j in range(ncols):
                total = total + fabs(_dot(&Q[i, 0], &K[j, 0], feat) * scale)
    return total / (rows * ncols)
