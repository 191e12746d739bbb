# cython: language_level=3
"""Compiled hot loops. Must agree exactly with ``iocseq.kernels._pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.stdlib cimport malloc, free, qsort

cnp.import_array()

ctypedef fused floating_t:
    float
    double


def scatter_add_rows(floating_t[:, ::1] out, const cnp.intp_t[::1] ids,
                     const floating_t[:, ::1] src):
    cdef Py_ssize_t n = ids.shape[0]
    cdef Py_ssize_t d = src.shape[1]
    cdef Py_ssize_t i, j, r
    if src.shape[0] != n or out.shape[1] != d:
        raise ValueError("scatter_add_rows: shape mismatch")
    with nogil:
        for i in range(n):
            r = ids[i]
            for j in range(d):
                out[r, j] += src[i, j]


cdef struct ValLab:
    float v
    int lab


cdef int _cmp_vallab(const void* a, const void* b) noexcept nogil:
    cdef float va = (<ValLab*>a).v
    cdef float vb = (<ValLab*>b).v
    if va < vb:
        return -1
    if va > vb:
        return 1
    return 0


def best_gini_split(const float[:, ::1] X, const cnp.intp_t[::1] y,
                    const cnp.intp_t[::1] sample_idx,
                    const cnp.intp_t[::1] features, int n_classes):
    """Return (feature, threshold, score) of the best split, or (-1, nan, parent).

    ``score`` is sum_c nl_c^2/nl + sum_c nr_c^2/nr; higher is purer. A split is
    only reported when it strictly beats the parent's sum_c n_c^2/n.
    """
    cdef Py_ssize_t n = sample_idx.shape[0]
    cdef Py_ssize_t k = features.shape[0]
    cdef Py_ssize_t i, fi, c
    cdef cnp.intp_t f
    cdef double parent_sq = 0.0, parent_score, best_score, score
    cdef double sl, sr, nl, nr, lc, rc
    cdef double best_thr = np.nan
    cdef long best_feat = -1
    cdef float vmin, vmax, v

    if n == 0:
        return -1, np.nan, 0.0

    cdef ValLab* buf = <ValLab*>malloc(n * sizeof(ValLab))
    cdef double* total = <double*>malloc(n_classes * sizeof(double))
    cdef double* left = <double*>malloc(n_classes * sizeof(double))
    if buf == NULL or total == NULL or left == NULL:
        free(buf); free(total); free(left)
        raise MemoryError()

    with nogil:
        for c in range(n_classes):
            total[c] = 0.0
        for i in range(n):
            total[y[sample_idx[i]]] += 1.0
        for c in range(n_classes):
            parent_sq += total[c] * total[c]
        parent_score = parent_sq / <double>n
        best_score = parent_score

        for fi in range(k):
            f = features[fi]
            vmin = X[sample_idx[0], f]
            vmax = vmin
            for i in range(n):
                v = X[sample_idx[i], f]
                buf[i].v = v
                buf[i].lab = <int>y[sample_idx[i]]
                if v < vmin:
                    vmin = v
                if v > vmax:
                    vmax = v
            if vmin == vmax:
                continue
            qsort(buf, n, sizeof(ValLab), _cmp_vallab)
            for c in range(n_classes):
                left[c] = 0.0
            sl = 0.0
            for i in range(n - 1):
                c = buf[i].lab
                # running sum of squares: (x+1)^2 - x^2 = 2x + 1
                sl += 2.0 * left[c] + 1.0
                left[c] += 1.0
                if buf[i].v == buf[i + 1].v:
                    continue
                sr = 0.0
                for c in range(n_classes):
                    rc = total[c] - left[c]
                    sr += rc * rc
                nl = <double>(i + 1)
                nr = <double>(n - i - 1)
                score = sl / nl + sr / nr
                if score > best_score:
                    best_score = score
                    best_feat = f
                    best_thr = (<double>buf[i].v + <double>buf[i + 1].v) / 2.0

    free(buf)
    free(total)
    free(left)
    return best_feat, best_thr, best_score
