"""Hierarchical localization: retrieval, scene expansion, per-scene GAM, prior-guided RANSAC, refinement."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import evaluation
from .bmnet import forward
from .geometry import RansacConfig, ransac_pnp, refine_pose, reprojection_errors
from .hungarian import hungarian_pooling
from .matcher import baseline_match, build_graph, knn_ratio_match
from .retrieval import expand_scenes, retrieve_images

log = logging.getLogger(__name__)

MATCHERS = ("gam", "plain", "ratio", "cross", "distance")
STAGES = ("retrieval", "matching", "bmnet", "ransac", "refine")


@dataclass
class LocalizeConfig:
    K: int = 3
    r: float = 0.7
    top_r: int = 20
    expand_m: int = 5
    ransac: RansacConfig = field(default_factory=RansacConfig)
    early_stop_inliers: float = 50
    max_scenes: int | None = None  # None: every expanded scene
    matcher: str = "gam"
    baseline_threshold: float = 0.7

    def __post_init__(self):
        if self.K < 1 or self.top_r < 1 or self.expand_m < 1:
            raise ValueError("K, top_r and expand_m must be positive")
        if not 0.0 <= self.r <= 1.0:
            raise ValueError("ratio must lie in [0, 1]")
        if self.max_scenes is not None and self.max_scenes < 1:
            raise ValueError("max_scenes must be positive")
        if self.early_stop_inliers < self.ransac.min_inliers:
            raise ValueError("early_stop_inliers must be at least min_inliers")
        if self.matcher not in MATCHERS:
            raise ValueError(f"unknown matcher {self.matcher!r}; choose from {MATCHERS}")


@dataclass
class LocalizationResult:
    status: str
    pose: object = None
    inlier_count: int = 0
    scene_index: int | None = None
    timings: dict = field(default_factory=lambda: dict.fromkeys(STAGES, 0.0))
    weights: np.ndarray | None = None
    matches: list = field(default_factory=list)  # (keypoint index, point id) selected in the reported scene
    diagnostics: dict = field(default_factory=dict)

    @property
    def ok(self):
        return self.status == "ok"


@dataclass
class _SceneOutcome:
    index: int
    pose: object
    inliers: int
    weights: np.ndarray
    matches: list


def _scene_points(model, scene):
    table = model.point_table
    rows = np.array(sorted(table.row_of[p] for p in scene.point_ids), dtype=np.int64)
    rows = rows[~np.isnan(table.descriptors[rows, 0])]
    return table.ids[rows], table.xyz[rows], table.descriptors[rows]


def _select(query, ids, xyz, desc, params, camera, config, clock):
    """Selected (keypoint, point row) pairs with their RANSAC priors and the per-edge weights."""
    t0 = time.perf_counter()
    if config.matcher in ("gam", "plain"):
        edges = knn_ratio_match(query.descriptors, desc, min(config.K, len(ids)), config.r)
        if len(edges) == 0:
            clock["matching"] += time.perf_counter() - t0
            return None
        graph = build_graph(query.xy, xyz, edges, point_refs=np.arange(len(ids)), camera=camera)
        clock["matching"] += time.perf_counter() - t0
        t1 = time.perf_counter()
        w, _ = forward(params, graph)
        clock["bmnet"] += time.perf_counter() - t1
        t2 = time.perf_counter()
        s = hungarian_pooling(graph, w) if config.matcher == "gam" else (w > 0.5).astype(np.int8)
        clock["matching"] += time.perf_counter() - t2
        sel = np.flatnonzero(s == 1)
        kp = graph.u_ref[graph.edge_u[sel]]
        rows = graph.v_ref[graph.edge_v[sel]]
        return kp, rows, w[sel], w
    edges = baseline_match(query.descriptors, desc, config.matcher, config.baseline_threshold)
    clock["matching"] += time.perf_counter() - t0
    if len(edges) == 0:
        return None
    return edges.u_index, edges.v_index, np.ones(len(edges)), np.ones(len(edges))


def _estimate(query, kp, pts, priors, camera, config, clock):
    """RANSAC, refinement over its inliers, then re-pruning at the achieved residual level."""
    px = query.xy[kp]
    t0 = time.perf_counter()
    res = ransac_pnp(px, pts, priors, camera, config.ransac)
    clock["ransac"] += time.perf_counter() - t0
    if not res.success:
        return None, res.best_inlier_count
    t1 = time.perf_counter()
    pose = res.pose
    mask = res.inliers
    if mask.sum() >= 4:
        pose = refine_pose(pose, px[mask], pts[mask], camera).pose
        err = reprojection_errors(pose.R, pose.t, camera, px, pts)
        inl = err[mask]
        # RANSAC's pixel threshold admits near-miss outliers; tighten to the residual spread and redo
        sigma = float(np.median(inl)) / 1.1774
        thr = min(config.ransac.inlier_threshold_px, max(0.01, 3.5 * sigma))
        tight = err < thr
        if tight.sum() >= 4 and not np.array_equal(tight, mask):
            pose = refine_pose(pose, px[tight], pts[tight], camera).pose
    err = reprojection_errors(pose.R, pose.t, camera, px, pts)
    count = int(np.sum(err < config.ransac.inlier_threshold_px))
    clock["refine"] += time.perf_counter() - t1
    return pose, count


def localize(model, params, query, camera=None, config=None):
    """Localize one query against ``model``; deterministic for fixed inputs and config."""
    config = config or LocalizeConfig()
    camera = camera or model.cameras[query.camera_id]
    clock = dict.fromkeys(STAGES, 0.0)
    diag = {"scenes": []}
    if query.n_keypoints < 4:
        return LocalizationResult("failed", timings=clock, diagnostics={"reason": "fewer than 4 query keypoints"})
    if config.matcher in ("gam", "plain") and params is None:
        raise ValueError(f"matcher {config.matcher!r} needs network parameters")
    t0 = time.perf_counter()
    retrieved = retrieve_images(model, query.global_descriptor, config.top_r)
    scenes = expand_scenes(model, retrieved, config.expand_m)
    if config.max_scenes is not None:
        scenes = scenes[: config.max_scenes]
    clock["retrieval"] += time.perf_counter() - t0
    if not scenes:
        return LocalizationResult("failed", timings=clock, diagnostics={"reason": "empty retrieval"})

    best = None
    fallback = None
    for index, scene in enumerate(scenes):
        entry = {"index": index, "anchor": scene.anchor_image, "points": len(scene.point_ids)}
        diag["scenes"].append(entry)
        try:
            ids, xyz, desc = _scene_points(model, scene)
            picked = _select(query, ids, xyz, desc, params, camera, config, clock)
            if picked is None:
                entry["skipped"] = "no candidate edges"
                log.info("scene %d: no candidate edges", index)
                continue
            kp, rows, priors, w = picked
            matches = list(zip(kp.tolist(), ids[rows].tolist()))
            entry["selected"] = len(matches)
            if fallback is None:
                fallback = _SceneOutcome(index, None, 0, w, matches)
            if len(kp) < 4:
                entry["skipped"] = "fewer than 4 selected matches"
                continue
            pose, count = _estimate(query, kp, xyz[rows], priors, camera, config, clock)
        except ValueError as exc:
            entry["skipped"] = str(exc)
            log.info("scene %d skipped: %s", index, exc)
            continue
        entry["inliers"] = count
        if pose is None:
            continue
        if best is None or count > best.inliers:
            best = _SceneOutcome(index, pose, count, w, matches)
        if count >= config.early_stop_inliers:
            break

    if best is not None and best.inliers >= config.ransac.min_inliers:
        return LocalizationResult("ok", best.pose, best.inliers, best.index, clock, best.weights, best.matches, diag)
    report = best or fallback
    diag["reason"] = "no scene reached the minimum inlier count"
    if report is None:
        return LocalizationResult("failed", timings=clock, diagnostics=diag)
    return LocalizationResult("failed", None, report.inliers, report.index, clock, report.weights, report.matches, diag)


def localize_batch(model, params, queries, camera=None, config=None, threads=1):
    """Independent localization of every query, plus a pooled metric summary."""
    queries = list(queries)
    if not queries:
        raise ValueError("empty query list")

    def one(q):
        return localize(model, params, q, camera, config)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(one, queries))
    else:
        results = [one(q) for q in queries]
    return results, evaluation.summarize(results, queries)


def result_json(result, zero_timings=False):
    """Result record in the CLI's JSON schema."""
    out = {"status": result.status}
    if result.pose is not None:
        q, t = result.pose.q, result.pose.t
        out.update(qw=q[0], qx=q[1], qy=q[2], qz=q[3], tx=t[0], ty=t[1], tz=t[2])
    else:
        out.update(dict.fromkeys(("qw", "qx", "qy", "qz", "tx", "ty", "tz")))
    out = {k: (float(v) if v is not None and k != "status" else v) for k, v in out.items()}
    out["inliers"] = int(result.inlier_count)
    out["scene_index"] = result.scene_index
    out["timings_ms"] = {k: (0.0 if zero_timings else 1000.0 * result.timings[k]) for k in STAGES}
    return out
