# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled shortest-augmenting-path assignment (minimum cost, rows <= cols)."""

import numpy as np

from libc.math cimport INFINITY


def assign_min_cost(double[:, ::1] cost):
    """Row -> column assignment minimising total cost; requires n_rows <= n_cols.

    Mirrors ``_hungarian_py.assign_min_cost`` operation for operation so both
    backends return the same assignment, ties included.
    """
    cdef Py_ssize_t n = cost.shape[0]
    cdef Py_ssize_t m = cost.shape[1]
    if n > m:
        raise ValueError("assign_min_cost needs n_rows <= n_cols")
    u_arr = np.zeros(n + 1)
    v_arr = np.zeros(m + 1)
    p_arr = np.zeros(m + 1, dtype=np.intp)
    way_arr = np.zeros(m + 1, dtype=np.intp)
    minv_arr = np.empty(m + 1)
    used_arr = np.empty(m + 1, dtype=np.uint8)
    cdef double[::1] u = u_arr
    cdef double[::1] v = v_arr
    cdef Py_ssize_t[::1] p = p_arr
    cdef Py_ssize_t[::1] way = way_arr
    cdef double[::1] minv = minv_arr
    cdef unsigned char[::1] used = used_arr
    cdef Py_ssize_t i, j, i0, j0, j1
    cdef double delta, cur
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        for j in range(m + 1):
            minv[j] = INFINITY
            used[j] = 0
        while True:
            used[j0] = 1
            i0 = p[j0]
            delta = INFINITY
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    out = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j] != 0:
            out[p[j] - 1] = j - 1
    return out
