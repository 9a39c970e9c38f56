"""Pure-numpy fallback for the compiled assignment kernel."""

import numpy as np


def assign_min_cost(cost):
    """Row -> column assignment minimising total cost; requires n_rows <= n_cols.

    Shortest augmenting paths with row/column potentials, one row at a time.
    The inner column scan is vectorised; strict comparisons and first-index
    argmin reproduce the compiled kernel's tie behaviour exactly.
    """
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n > m:
        raise ValueError("assign_min_cost needs n_rows <= n_cols")
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.intp)
    way = np.zeros(m + 1, dtype=np.intp)
    cols = np.arange(1, m + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(cols[np.argmin(cand)])
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    out = np.full(n, -1, dtype=np.int64)
    assigned = np.flatnonzero(p[1:])
    out[p[1:][assigned] - 1] = assigned
    return out
