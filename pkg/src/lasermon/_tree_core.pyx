# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled split search and tree traversal.

Kept operation-for-operation in step with ``_tree_py`` (sequential sums in
node order, identical score expression) so both backends agree bitwise.
"""
import numpy as np
cimport numpy as cnp
from libc.stdlib cimport malloc, free
from libc.math cimport INFINITY

cnp.import_array()

ctypedef cnp.intp_t intp


cdef inline bint _less(double a, intp ia, double b, intp ib) noexcept nogil:
    return a < b or (a == b and ia < ib)


cdef void _merge_sort(double* key, intp* pos, double* kbuf, intp* pbuf, intp n) noexcept nogil:
    """Sort ``pos`` by (key, pos); equivalent to a stable argsort."""
    cdef intp width = 1, lo, mid, hi, i, j, k
    cdef double* src_k = key
    cdef intp* src_p = pos
    cdef double* dst_k = kbuf
    cdef intp* dst_p = pbuf
    cdef double* tk
    cdef intp* tp
    while width < n:
        lo = 0
        while lo < n:
            mid = lo + width if lo + width < n else n
            hi = lo + 2 * width if lo + 2 * width < n else n
            i = lo
            j = mid
            k = lo
            while i < mid and j < hi:
                if _less(src_k[j], src_p[j], src_k[i], src_p[i]):
                    dst_k[k] = src_k[j]
                    dst_p[k] = src_p[j]
                    j += 1
                else:
                    dst_k[k] = src_k[i]
                    dst_p[k] = src_p[i]
                    i += 1
                k += 1
            while i < mid:
                dst_k[k] = src_k[i]
                dst_p[k] = src_p[i]
                i += 1
                k += 1
            while j < hi:
                dst_k[k] = src_k[j]
                dst_p[k] = src_p[j]
                j += 1
                k += 1
            lo += 2 * width
        tk = src_k; src_k = dst_k; dst_k = tk
        tp = src_p; src_p = dst_p; dst_p = tp
        width *= 2
    if src_k != key:
        for i in range(n):
            key[i] = src_k[i]
            pos[i] = src_p[i]


def best_split(const double[:, ::1] X, const double[::1] y, const intp[::1] idx,
               const intp[::1] features, intp min_leaf):
    cdef intp n = idx.shape[0]
    cdef intp n_feat = features.shape[0]
    cdef intp best_f = -1
    cdef double best_t = 0.0
    cdef double best_score = -INFINITY
    cdef intp a, i, f
    cdef double total, s_l, s_r, score, lo, hi, thr
    cdef double* key
    cdef intp* pos
    cdef double* kbuf
    cdef intp* pbuf
    if n < 2:
        return best_f, best_t, best_score
    key = <double*> malloc(n * sizeof(double))
    kbuf = <double*> malloc(n * sizeof(double))
    pos = <intp*> malloc(n * sizeof(intp))
    pbuf = <intp*> malloc(n * sizeof(intp))
    try:
        with nogil:
            for a in range(n_feat):
                f = features[a]
                for i in range(n):
                    key[i] = X[idx[i], f]
                    pos[i] = i
                _merge_sort(key, pos, kbuf, pbuf, n)
                total = 0.0
                for i in range(n):
                    total = total + y[idx[pos[i]]]
                s_l = 0.0
                for i in range(n - 1):
                    s_l = s_l + y[idx[pos[i]]]
                    if i + 1 < min_leaf or n - i - 1 < min_leaf:
                        continue
                    if not key[i] < key[i + 1]:
                        continue
                    s_r = total - s_l
                    score = s_l * s_l / <double>(i + 1) + s_r * s_r / <double>(n - i - 1)
                    if score > best_score:
                        lo = key[i]
                        hi = key[i + 1]
                        thr = lo / 2.0 + hi / 2.0
                        if thr >= hi or thr < lo:
                            thr = lo
                        best_f = f
                        best_t = thr
                        best_score = score
    finally:
        free(key)
        free(kbuf)
        free(pos)
        free(pbuf)
    return best_f, best_t, best_score


def random_split(const double[:, ::1] X, const double[::1] y, const intp[::1] idx,
                 const intp[::1] features, const double[::1] u, intp min_leaf):
    cdef intp n = idx.shape[0]
    cdef intp n_feat = features.shape[0]
    cdef intp best_f = -1
    cdef double best_t = 0.0
    cdef double best_score = -INFINITY
    cdef intp a, i, f, n_l, n_r
    cdef double total, s_l, s_r, score, lo, hi, thr, x
    if n < 2:
        return best_f, best_t, best_score
    with nogil:
        total = 0.0
        for i in range(n):
            total = total + y[idx[i]]
        for a in range(n_feat):
            f = features[a]
            lo = X[idx[0], f]
            hi = lo
            for i in range(1, n):
                x = X[idx[i], f]
                if x < lo:
                    lo = x
                if x > hi:
                    hi = x
            if not hi > lo:
                continue
            thr = lo + u[a] * (hi - lo)
            if thr >= hi:
                thr = lo
            n_l = 0
            s_l = 0.0
            for i in range(n):
                if X[idx[i], f] <= thr:
                    s_l = s_l + y[idx[i]]
                    n_l += 1
                else:
                    s_l = s_l + 0.0
            n_r = n - n_l
            if n_l < min_leaf or n_r < min_leaf:
                continue
            s_r = total - s_l
            score = s_l * s_l / <double>n_l + s_r * s_r / <double>n_r
            if score > best_score:
                best_f = f
                best_t = thr
                best_score = score
    return best_f, best_t, best_score


def predict_tree(const intp[::1] feature, const double[::1] threshold,
                 const intp[::1] left, const intp[::1] right,
                 const double[::1] value, const double[:, ::1] X):
    cdef intp n = X.shape[0]
    cdef intp r, node
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for r in range(n):
            node = 0
            while feature[node] >= 0:
                if X[r, feature[node]] <= threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
            o[r] = value[node]
    return out
