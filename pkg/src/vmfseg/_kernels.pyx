# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: pixel-to-prototype assignment and segment sums.

Semantics must stay identical to vmfseg._kernels_py (the pure-numpy
fallback); both are exercised by the same tests and compared by the
kernel benchmark. Accumulation order is pixel order, matching the
fallback's np.add.at, so segment sums agree bit for bit.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()


def assign(const double[:, ::1] vectors, const double[:, ::1] protos):
    """Assign each row of `vectors` to the max-dot-product row of `protos`.

    Returns (idx, sims): int64 winning prototype index per vector (ties
    break to the smallest index) and the winning dot product.
    """
    cdef Py_ssize_t n = vectors.shape[0]
    cdef Py_ssize_t d = vectors.shape[1]
    cdef Py_ssize_t k = protos.shape[0]
    if protos.shape[1] != d:
        raise ValueError("vectors and prototypes must share their last dimension")
    if k < 1:
        raise ValueError("need at least one prototype")

    idx_arr = np.empty(n, dtype=np.int64)
    sim_arr = np.empty(n, dtype=np.float64)
    cdef long long[::1] idx = idx_arr
    cdef double[::1] sims = sim_arr

    # Prototype-major layout makes the inner loop contiguous over
    # independent accumulators, which vectorizes without reordering any
    # single accumulator's additions.
    cdef double[:, ::1] proto_t = np.ascontiguousarray(np.asarray(protos).T)
    acc_arr = np.empty(k, dtype=np.float64)
    cdef double[::1] acc = acc_arr

    cdef Py_ssize_t i, j, c, best_j
    cdef double best, vc
    for i in range(n):
        for j in range(k):
            acc[j] = 0.0
        for c in range(d):
            vc = vectors[i, c]
            for j in range(k):
                acc[j] += vc * proto_t[c, j]
        best = -INFINITY
        best_j = 0
        for j in range(k):
            if acc[j] > best:
                best = acc[j]
                best_j = j
        idx[i] = best_j
        sims[i] = best
    return idx_arr, sim_arr


def segment_sums(const double[:, ::1] vectors, const long long[::1] labels, Py_ssize_t num_segments):
    """Per-segment vector sums and pixel counts, accumulated in pixel order."""
    cdef Py_ssize_t n = vectors.shape[0]
    cdef Py_ssize_t d = vectors.shape[1]
    if labels.shape[0] != n:
        raise ValueError("labels length must match vector count")

    sums_arr = np.zeros((num_segments, d), dtype=np.float64)
    counts_arr = np.zeros(num_segments, dtype=np.int64)
    cdef double[:, ::1] sums = sums_arr
    cdef long long[::1] counts = counts_arr

    cdef Py_ssize_t i, c
    cdef long long lab
    for i in range(n):
        lab = labels[i]
        if lab < 0 or lab >= num_segments:
            raise ValueError("segment id out of range")
        for c in range(d):
            sums[lab, c] += vectors[i, c]
        counts[lab] += 1
    return sums_arr, counts_arr
