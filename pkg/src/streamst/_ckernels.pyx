# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the sequential loops in ``_kernels_py``."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def fire_walk(double[::1] alpha, double acc0=0.0, long u0=0,
              double threshold=1.0, double tol=1e-9):
    cdef Py_ssize_t n = alpha.shape[0], t
    cdef double acc = acc0, limit = threshold - tol
    cdef long u = u0
    seg_arr = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] seg = seg_arr
    fires = []
    for t in range(n):
        seg[t] = u
        acc += alpha[t]
        while acc >= limit:
            fires.append(t)
            acc -= threshold
            u += 1
    return seg_arr, np.asarray(fires, dtype=np.int64), acc


def fire_walk_batch(double[:, ::1] alpha, lengths, double threshold=1.0, double tol=1e-9):
    cdef Py_ssize_t b = alpha.shape[0], t_max = alpha.shape[1], i, t, n, cap
    cdef double acc, limit = threshold - tol, total, row_max = 0.0
    cdef long u
    cdef cnp.int64_t[::1] lens = np.ascontiguousarray(lengths, dtype=np.int64)
    for i in range(b):
        total = 0.0
        for t in range(lens[i]):
            total += alpha[i, t]
        if total > row_max:
            row_max = total
    cap = <Py_ssize_t>(row_max / threshold) + 2
    seg_arr = np.full((b, t_max), -1, dtype=np.int64)
    counts_arr = np.zeros(b, dtype=np.int64)
    res_arr = np.zeros(b, dtype=np.float64)
    fires_arr = np.full((b, cap), -1, dtype=np.int64)
    cdef cnp.int64_t[:, ::1] seg = seg_arr
    cdef cnp.int64_t[::1] counts = counts_arr
    cdef double[::1] res = res_arr
    cdef cnp.int64_t[:, ::1] fires = fires_arr
    for i in range(b):
        acc = 0.0
        u = 0
        n = lens[i]
        for t in range(n):
            seg[i, t] = u
            acc += alpha[i, t]
            while acc >= limit:
                fires[i, u] = t
                acc -= threshold
                u += 1
        counts[i] = u
        res[i] = acc
    width = max(int(counts_arr.max()) if b else 0, 1)
    return seg_arr, counts_arr, res_arr, np.ascontiguousarray(fires_arr[:, :width])


def lagging(delays, double total, double ref_len):
    cdef double[::1] d = np.ascontiguousarray(delays, dtype=np.float64)
    cdef Py_ssize_t n = d.shape[0], i, tau = n
    cdef double rate = total / ref_len, al = 0.0, ap = 0.0, dal = 0.0, g = 0.0
    for i in range(n):
        if d[i] == total:
            tau = i + 1
            break
    for i in range(tau):
        al += d[i] - i * rate
    for i in range(n):
        ap += d[i]
        if i == 0:
            g = d[i]
        elif d[i] > g + rate:
            g = d[i]
        else:
            g = g + rate
        dal += g - i * rate
    return al / tau, ap / (total * n), dal / n
