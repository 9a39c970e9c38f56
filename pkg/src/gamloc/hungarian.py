"""Hungarian pooling: maximum-weight one-to-one edge selection on a candidate graph.

The assignment kernel is compiled (``_hungarian``) when the extension is
built and falls back to ``_hungarian_py`` otherwise. ``BACKEND`` names the one
in use; ``GAMLOC_PURE_PYTHON=1`` forces the fallback.
"""

from __future__ import annotations

import os

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from . import _hungarian_py

if os.environ.get("GAMLOC_PURE_PYTHON"):
    _compiled = None
else:
    try:
        from . import _hungarian as _compiled
    except ImportError:
        _compiled = None

BACKEND = "cython" if _compiled is not None else "python"
_KERNELS = {"python": _hungarian_py.assign_min_cost}
if _compiled is not None:
    _KERNELS["cython"] = _compiled.assign_min_cost


def max_weight_assignment(W, backend=None):
    """Pairs (row, col) of a maximum-total-weight assignment of a dense non-negative matrix."""
    kernel = _KERNELS[backend or BACKEND]
    W = np.asarray(W, dtype=np.float64)
    n, m = W.shape
    if n == 0 or m == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    if n <= m:
        cols = kernel(np.ascontiguousarray(-W))
        return np.arange(n, dtype=np.int64), cols
    rows = kernel(np.ascontiguousarray(-W.T))
    return rows, np.arange(m, dtype=np.int64)


def _components(edge_u, edge_v, M, N):
    T = len(edge_u)
    adj = coo_matrix((np.ones(T), (edge_u, M + edge_v)), shape=(M + N, M + N))
    _, labels = connected_components(adj, directed=False)
    return labels[edge_u]


def match_edges(edge_u, edge_v, w, M=None, N=None, backend=None):
    """0/1 selection over edges forming a maximum-weight matching.

    Sparse weights are scattered into a zero-filled matrix per connected
    component; cells that are not edges can be assigned but are never selected.
    Negative-weight edges can never improve a matching and are dropped up front.
    """
    edge_u = np.asarray(edge_u, dtype=np.int64)
    edge_v = np.asarray(edge_v, dtype=np.int64)
    w = np.asarray(w, dtype=np.float64)
    T = len(w)
    if len(edge_u) != T or len(edge_v) != T:
        raise ValueError("edge arrays and weights differ in length")
    if not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite")
    s = np.zeros(T, dtype=np.int8)
    if T == 0:
        return s
    M = int(edge_u.max()) + 1 if M is None else M
    N = int(edge_v.max()) + 1 if N is None else N
    live = np.flatnonzero(w >= 0)
    if len(live) == 0:
        return s
    comp = _components(edge_u[live], edge_v[live], M, N)
    order = np.argsort(comp, kind="stable")
    comp_sorted = comp[order]
    bounds = np.flatnonzero(np.diff(comp_sorted)) + 1
    starts = np.concatenate([[0], bounds])
    ends = np.concatenate([bounds, [len(order)]])
    single = (ends - starts) == 1
    s[live[order[starts[single]]]] = 1
    for a, b in zip(starts[~single], ends[~single]):
        ks = live[order[a:b]]
        us, ui = np.unique(edge_u[ks], return_inverse=True)
        vs, vi = np.unique(edge_v[ks], return_inverse=True)
        Wc = np.zeros((len(us), len(vs)))
        slot = np.full((len(us), len(vs)), -1, dtype=np.int64)
        Wc[ui, vi] = w[ks]
        slot[ui, vi] = ks
        rows, cols = max_weight_assignment(Wc, backend)
        chosen = slot[rows, cols]
        s[chosen[chosen >= 0]] = 1
    return s


def hungarian_pooling(graph, w, backend=None):
    """Assignment vector for ``graph`` under edge weights ``w``."""
    w = np.asarray(w, dtype=np.float64)
    if len(w) != graph.T:
        raise ValueError(f"expected {graph.T} weights, got {len(w)}")
    return match_edges(graph.edge_u, graph.edge_v, w, graph.M, graph.N, backend)


def matching_weight(edge_u, edge_v, w, s):
    return float(np.sum(np.asarray(w)[np.asarray(s) == 1]))


def rematching_margin(edge_u, edge_v, w, k, backend=None):
    """How much unselected edge ``k`` could grow before entering the optimal matching.

    ``OPT - (w_k + OPT without k's endpoints)``; zero or negative for edges
    already in (or tied into) an optimal matching.
    """
    edge_u = np.asarray(edge_u)
    edge_v = np.asarray(edge_v)
    w = np.asarray(w, dtype=np.float64)
    s = match_edges(edge_u, edge_v, w, backend=backend)
    best = float(w[s == 1].sum())
    rest = (edge_u != edge_u[k]) & (edge_v != edge_v[k])
    s_rest = match_edges(edge_u[rest], edge_v[rest], w[rest], backend=backend) if rest.any() else np.zeros(0)
    forced = w[k] + float(w[rest][s_rest == 1].sum())
    return best - forced
