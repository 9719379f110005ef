# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot loops in ``_pykernels``.

Accumulation order matches the numpy fallback exactly (array order, starting
from 0.0), and the extension is built with ``-ffp-contract=off`` so no fused
multiply-adds change the rounding.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def stencil_sum(values, cnp.int64_t[::1] receivers, cnp.int64_t[::1] senders,
                double[::1] weights, double[::1] ghost, Py_ssize_t n):
    cdef double[::1] x = np.ascontiguousarray(values, dtype=np.float64)
    out_arr = np.zeros(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t k, m = receivers.shape[0]
    cdef cnp.int64_t s, r
    cdef double sv
    for k in range(m):
        r = receivers[k]
        s = senders[k]
        if s >= 0:
            sv = x[s]
        else:
            sv = ghost[k]
        out[r] += weights[k] * (sv - x[r])
    return out_arr


def segment_sum(rows, cnp.int64_t[::1] segment_ids, Py_ssize_t n):
    rows = np.ascontiguousarray(rows, dtype=np.float64)
    cdef Py_ssize_t k, j, m = segment_ids.shape[0], f
    cdef double[::1] v1
    cdef double[:, ::1] v2
    cdef double[::1] o1
    cdef double[:, ::1] o2
    if rows.ndim == 1:
        out_arr = np.zeros(n, dtype=np.float64)
        v1 = rows
        o1 = out_arr
        for k in range(m):
            o1[segment_ids[k]] += v1[k]
        return out_arr
    f = rows.shape[1]
    out_arr = np.zeros((n, f), dtype=np.float64)
    v2 = rows
    o2 = out_arr
    for k in range(m):
        for j in range(f):
            o2[segment_ids[k], j] += v2[k, j]
    return out_arr
