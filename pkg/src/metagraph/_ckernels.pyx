# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled row scatter-add used by segment reductions.

Index validation happens in the caller; these loops do no bounds checks.
"""

import numpy as np


def scatter_add_rows(double[:, ::1] values, long long[::1] ids, Py_ssize_t num_segments):
    """Sum rows of ``values`` into ``num_segments`` buckets selected by ``ids``."""
    cdef Py_ssize_t n_rows = values.shape[0]
    cdef Py_ssize_t width = values.shape[1]
    out_arr = np.zeros((num_segments, width), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, row
    with nogil:
        for i in range(n_rows):
            row = <Py_ssize_t> ids[i]
            for j in range(width):
                out[row, j] += values[i, j]
    return out_arr
