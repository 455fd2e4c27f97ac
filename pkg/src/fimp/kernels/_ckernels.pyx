# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled affinity / top-k kernels (see numpy_impl for the contract)."""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def affinity_batch(double[:, :, ::1] feats):
    cdef Py_ssize_t B = feats.shape[0]
    cdef Py_ssize_t N = feats.shape[1]
    cdef Py_ssize_t C = feats.shape[2]
    out_arr = np.empty((B, N, N), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    sq_arr = np.empty(N, dtype=np.float64)
    cdef double[::1] sq = sq_arr
    cdef Py_ssize_t b, i, j, c
    cdef double acc, dot
    for b in range(B):
        for i in range(N):
            acc = 0.0
            for c in range(C):
                acc += feats[b, i, c] * feats[b, i, c]
            sq[i] = acc
        for i in range(N):
            out[b, i, i] = 0.0
            for j in range(i + 1, N):
                dot = 0.0
                for c in range(C):
                    dot += feats[b, i, c] * feats[b, j, c]
                acc = 2.0 * dot - sq[i] - sq[j]
                out[b, i, j] = acc
                out[b, j, i] = acc
    return out_arr


def topk_batch(double[:, :, ::1] scores, int k):
    cdef Py_ssize_t B = scores.shape[0]
    cdef Py_ssize_t N = scores.shape[1]
    cdef Py_ssize_t kk = k if k < N - 1 else N - 1
    if kk < 0:
        kk = 0
    out_arr = np.empty((B, N, kk), dtype=np.int64)
    cdef long long[:, :, ::1] out = out_arr
    taken_arr = np.zeros(N, dtype=np.uint8)
    cdef unsigned char[::1] taken = taken_arr
    cdef Py_ssize_t b, i, j, pick, best_j
    cdef double best
    for b in range(B):
        for i in range(N):
            for j in range(N):
                taken[j] = 0
            taken[i] = 1  # no self-selection
            for pick in range(kk):
                best_j = -1
                best = 0.0
                for j in range(N):
                    if taken[j]:
                        continue
                    # strict > keeps the first (lowest-index) of tied scores
                    if best_j < 0 or scores[b, i, j] > best:
                        best = scores[b, i, j]
                        best_j = j
                taken[best_j] = 1
                out[b, i, pick] = best_j
    return out_arr
