"""Descriptor-space candidate generation and bipartite graph assembly."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

UNIT_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class CandidateEdges:
    """Candidate 2D-3D edges in column form, ordered by query index then rank."""

    u_index: np.ndarray
    v_index: np.ndarray
    distance: np.ndarray
    nn_rank: np.ndarray

    def __len__(self):
        return len(self.u_index)

    def pairs(self):
        return set(zip(self.u_index.tolist(), self.v_index.tolist()))

    @classmethod
    def empty(cls):
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), np.zeros(0), z.copy())


@dataclass(frozen=True, eq=False)
class BipartiteGraph:
    """U (M x 2 pixels), V (N x 3 world), and T edges indexing rows of U and V.

    ``u_ref`` maps U rows back to keypoint indices, ``v_ref`` maps V rows back to
    3D point ids (or whatever reference the caller supplied). ``camera`` is
    optional and, when set, lets the network normalise pixels by intrinsics.
    """

    U: np.ndarray
    V: np.ndarray
    edge_u: np.ndarray
    edge_v: np.ndarray
    distance: np.ndarray
    u_ref: np.ndarray
    v_ref: np.ndarray
    camera: object = None

    @property
    def M(self):
        return len(self.U)

    @property
    def N(self):
        return len(self.V)

    @property
    def T(self):
        return len(self.edge_u)


def _check_unit(X, name):
    if X.ndim != 2:
        raise ValueError(f"{name} must be a 2D array")
    if len(X) and np.any(np.abs(np.linalg.norm(X, axis=1) - 1.0) > UNIT_TOL):
        raise ValueError(f"{name} descriptors must be unit norm")


def descriptor_distances(A, B):
    """Euclidean distances between unit descriptors via ``sqrt(2 - 2<a, b>)``."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    _check_unit(A, "query")
    _check_unit(B, "point")
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"descriptor dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    return np.sqrt(np.maximum(0.0, 2.0 - 2.0 * (A @ B.T)))


def _sorted_neighbors(dist, K):
    # stable argsort keeps ascending column index among equal distances
    order = np.argsort(dist, axis=1, kind="stable")[:, :K]
    return order, np.take_along_axis(dist, order, axis=1)


def knn_ratio_match(query, points, K=3, r=0.7):
    """Keep the nearest neighbour plus every k-th neighbour (k <= K) with ``d1/dk >= r``."""
    if K < 1:
        raise ValueError("K must be at least 1")
    if not 0.0 <= r <= 1.0:
        raise ValueError("ratio must lie in [0, 1]")
    dist = descriptor_distances(query, points)
    M, N = dist.shape
    if N < K:
        raise ValueError(f"need at least K={K} points, got {N}")
    if M == 0:
        return CandidateEdges.empty()
    order, d = _sorted_neighbors(dist, K)
    d1 = d[:, :1]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(d > 0, d1 / np.where(d > 0, d, 1.0), 1.0)
    keep = ratio >= r
    keep[:, 0] = True
    rows, ranks = np.nonzero(keep)
    return CandidateEdges(rows.astype(np.int64), order[rows, ranks].astype(np.int64), d[rows, ranks], ranks.astype(np.int64) + 1)


def baseline_match(query, points, mode="ratio", threshold=0.7):
    """Nearest-neighbour matching filtered by ratio test, distance threshold, or cross check."""
    dist = descriptor_distances(query, points)
    M, N = dist.shape
    if mode == "ratio":
        if not 0.0 < threshold <= 1.0:
            raise ValueError("ratio threshold must lie in (0, 1]")
        if N < 2:
            raise ValueError("ratio test needs at least 2 points")
    elif mode == "distance":
        if threshold <= 0:
            raise ValueError("distance threshold must be positive")
    elif mode != "cross":
        raise ValueError(f"unknown baseline mode {mode!r}")
    if M == 0 or N == 0:
        return CandidateEdges.empty()
    order, d = _sorted_neighbors(dist, min(2, N))
    rows = np.arange(M)
    if mode == "ratio":
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(d[:, 1] > 0, d[:, 0] / np.where(d[:, 1] > 0, d[:, 1], 1.0), 1.0)
        keep = ratio < threshold
    elif mode == "distance":
        keep = d[:, 0] < threshold
    else:
        back = np.argsort(dist.T, axis=1, kind="stable")[:, 0]
        keep = back[order[:, 0]] == rows
    rows = rows[keep]
    return CandidateEdges(rows, order[rows, 0].astype(np.int64), d[rows, 0], np.ones(len(rows), dtype=np.int64))


def build_graph(keypoints_xy, points_xyz, edges, point_refs=None, camera=None):
    """Compact the matched 2D and 3D points into a bipartite graph.

    Only endpoints of at least one edge survive; rows are renumbered densely in
    ascending original order. ``point_refs`` (default: row indices) become
    ``v_ref``.
    """
    if len(edges) == 0:
        raise ValueError("no candidate edges to build a graph from")
    keypoints_xy = np.asarray(keypoints_xy, dtype=np.float64)
    points_xyz = np.asarray(points_xyz, dtype=np.float64)
    eu = np.asarray(edges.u_index, dtype=np.int64)
    ev = np.asarray(edges.v_index, dtype=np.int64)
    if eu.min() < 0 or eu.max() >= len(keypoints_xy) or ev.min() < 0 or ev.max() >= len(points_xyz):
        raise ValueError("edge references a missing keypoint or point")
    if len(set(zip(eu.tolist(), ev.tolist()))) != len(eu):
        raise ValueError("duplicate (u, v) edge")
    u_keep, edge_u = np.unique(eu, return_inverse=True)
    v_keep, edge_v = np.unique(ev, return_inverse=True)
    refs = np.arange(len(points_xyz)) if point_refs is None else np.asarray(point_refs)
    return BipartiteGraph(
        keypoints_xy[u_keep],
        points_xyz[v_keep],
        edge_u.astype(np.int64),
        edge_v.astype(np.int64),
        np.asarray(edges.distance, dtype=np.float64),
        u_keep,
        refs[v_keep],
        camera,
    )
