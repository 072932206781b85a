# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels; see ``_fallback.py`` for the reference semantics."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, INFINITY

cnp.import_array()


def range_predict(states, epochs, beacons):
    cdef double[:, ::1] s = np.ascontiguousarray(states, dtype=np.float64)
    cdef long long[::1] e = np.ascontiguousarray(epochs, dtype=np.int64)
    cdef double[:, ::1] b = np.ascontiguousarray(beacons, dtype=np.float64)
    cdef Py_ssize_t n = e.shape[0], ndim = b.shape[1], nstate = s.shape[1]
    pred_arr = np.empty(n, dtype=np.float64)
    grad_arr = np.zeros((n, nstate), dtype=np.float64)
    cdef double[::1] pred = pred_arr
    cdef double[:, ::1] grad = grad_arr
    cdef Py_ssize_t r, c
    cdef long long ep
    cdef double d2, dist, diff
    with nogil:
        for r in range(n):
            ep = e[r]
            d2 = 0.0
            for c in range(ndim):
                diff = s[ep, c] - b[r, c]
                d2 = d2 + diff * diff
            dist = sqrt(d2)
            pred[r] = dist + s[ep, ndim]
            if dist > 0.0:
                for c in range(ndim):
                    grad[r, c] = (s[ep, c] - b[r, c]) / dist
            grad[r, ndim] = 1.0
    return pred_arr, grad_arr


def knn_search(data, Py_ssize_t k):
    cdef double[:, ::1] x = np.ascontiguousarray(data, dtype=np.float64)
    cdef Py_ssize_t n = x.shape[0], ndim = x.shape[1]
    idx_arr = np.empty((n, k), dtype=np.int64)
    d2_arr = np.empty((n, k), dtype=np.float64)
    cdef long long[:, ::1] idx = idx_arr
    cdef double[:, ::1] best = d2_arr
    cdef Py_ssize_t i, j, c, pos, filled
    cdef double acc, delta
    with nogil:
        for i in range(n):
            filled = 0
            for j in range(n):
                if j == i:
                    continue
                acc = 0.0
                for c in range(ndim):
                    delta = x[i, c] - x[j, c]
                    acc = acc + delta * delta
                if filled == k and acc >= best[i, k - 1]:
                    continue
                # insertion keeps earlier (lower) indices ahead on ties
                pos = filled if filled < k else k - 1
                while pos > 0 and best[i, pos - 1] > acc:
                    if pos < k:
                        best[i, pos] = best[i, pos - 1]
                        idx[i, pos] = idx[i, pos - 1]
                    pos -= 1
                best[i, pos] = acc
                idx[i, pos] = j
                if filled < k:
                    filled += 1
    return idx_arr, d2_arr


def quad_forms(data, means, factors):
    cdef double[:, ::1] x = np.ascontiguousarray(data, dtype=np.float64)
    cdef double[:, ::1] mu = np.ascontiguousarray(means, dtype=np.float64)
    cdef double[:, :, ::1] a = np.ascontiguousarray(factors, dtype=np.float64)
    cdef Py_ssize_t n = x.shape[0], ndim = x.shape[1], ncomp = mu.shape[0]
    out_arr = np.zeros((n, ncomp), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t r, m, i, j
    cdef double proj
    with nogil:
        for m in range(ncomp):
            for r in range(n):
                for j in range(ndim):
                    proj = 0.0
                    for i in range(j, ndim):
                        proj = proj + (x[r, i] - mu[m, i]) * a[m, i, j]
                    out[r, m] = out[r, m] + proj * proj
    return out_arr
