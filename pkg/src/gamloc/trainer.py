"""Training BMNet from SfM models with online kNN-ratio negative mining."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .bmnet import BmnetConfig, backward, forward, init_params, loss
from .hungarian import hungarian_pooling
from .matcher import CandidateEdges, build_graph, knn_ratio_match

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


class NoCovisibleImagesError(ValueError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 1
    epochs: int = 140
    n2d: int = 512
    n3d: int = 512
    K: int = 3
    r: float = 0.7
    seed: int = 0
    hungarian: bool = True
    mining: bool = True
    network: BmnetConfig = field(default_factory=BmnetConfig)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning rate must be non-negative")
        if self.batch_size < 1 or self.epochs < 0 or self.n2d < 1 or self.n3d < 1 or self.K < 1:
            raise ValueError("batch size, epochs, sample sizes and K must be positive")
        if not 0.0 <= self.r <= 1.0:
            raise ValueError("ratio must lie in [0, 1]")


@dataclass
class LabeledGraph:
    graph: object
    labels: np.ndarray
    n_true_available: int  # sampled keypoints whose true 3D point is in the sampled 3D set


class TrainingIndex:
    """Per-model arrays reused across training samples."""

    def __init__(self, model):
        self.model = model
        table = model.point_table
        self.ids = table.ids
        self.xyz = table.xyz
        D = model.descriptor_dim
        self.desc_sum = np.zeros((len(self.ids), D))
        self.count = np.zeros(len(self.ids), dtype=np.int64)
        self.kp_row = {}
        for iid, img in model.images.items():
            self.kp_row[iid] = np.full(img.n_keypoints, -1, dtype=np.int64)
        for row, pid in enumerate(self.ids):
            for iid, kp in model.points[int(pid)].track:
                self.desc_sum[row] += model.images[iid].descriptors[kp]
                self.count[row] += 1
                self.kp_row[iid][kp] = row
        self._support = {}

    def support_rows(self, image_id):
        """Rows of points observed by any other image covisible with ``image_id``."""
        if image_id not in self._support:
            scenes = self.model.meta_scenes
            mine = scenes[image_id]
            union = set()
            for j, other in scenes.items():
                if j != image_id and mine & other:
                    union |= other
            if not union:
                raise NoCovisibleImagesError(f"image {image_id} has no covisible images")
            row_of = self.model.point_table.row_of
            self._support[image_id] = np.array(sorted(row_of[p] for p in union), dtype=np.int64)
        return self._support[image_id]

    def leave_one_out(self, image_id, rows):
        """Mean descriptors of ``rows`` without image ``image_id``'s observations; NaN rows when undefined."""
        img = self.model.images[image_id]
        s = self.desc_sum[rows].copy()
        c = self.count[rows].astype(np.float64)
        kp_row = self.kp_row[image_id]
        own = np.flatnonzero(kp_row >= 0)
        own_rows = kp_row[own]
        pos = np.searchsorted(rows, own_rows)
        pos = np.clip(pos, 0, max(len(rows) - 1, 0))
        hit = (len(rows) > 0) & (rows[pos] == own_rows) if len(rows) else np.zeros(0, dtype=bool)
        s[pos[hit]] -= img.descriptors[own[hit]]
        c[pos[hit]] -= 1
        with np.errstate(invalid="ignore", divide="ignore"):
            mean = s / c[:, None]
            norm = np.linalg.norm(mean, axis=1, keepdims=True)
            out = mean / norm
        out[(c <= 0) | (norm[:, 0] < 1e-12)] = np.nan
        return out


def _random_edges(kp_truth_col, n3, K, rng):
    """Per keypoint: its true 3D partner (when sampled) plus uniformly random negatives, K in total."""
    us, vs = [], []
    k = min(K, n3)
    for i, true_col in enumerate(kp_truth_col):
        chosen = [int(true_col)] if true_col >= 0 else []
        pool = rng.permutation(n3)
        for c in pool:
            if len(chosen) >= k:
                break
            if c not in chosen:
                chosen.append(int(c))
        us.extend([i] * len(chosen))
        vs.extend(chosen)
    us = np.array(us, dtype=np.int64)
    return CandidateEdges(us, np.array(vs, dtype=np.int64), np.zeros(len(us)), np.ones(len(us), dtype=np.int64))


def make_training_graph(model, image_id, config, sample_seed, index=None):
    """Labelled bipartite graph for one database image, or ``None`` when no candidate edge survives."""
    index = index or TrainingIndex(model)
    img = model.images[image_id]
    rng = np.random.default_rng([config.seed, image_id, sample_seed])
    support = index.support_rows(image_id)
    desc3 = index.leave_one_out(image_id, support)
    valid = ~np.isnan(desc3[:, 0])
    support, desc3 = support[valid], desc3[valid]
    if len(support) == 0 or img.n_keypoints == 0:
        return None
    sel2 = np.sort(rng.choice(img.n_keypoints, min(config.n2d, img.n_keypoints), replace=False))
    pick3 = np.sort(rng.choice(len(support), min(config.n3d, len(support)), replace=False))
    rows3 = support[pick3]
    desc3 = desc3[pick3]
    truth_rows = index.kp_row[image_id][sel2]
    col_of_row = {int(r): c for c, r in enumerate(rows3)}
    truth_col = np.array([col_of_row.get(int(r), -1) for r in truth_rows], dtype=np.int64)
    if config.mining:
        edges = knn_ratio_match(img.descriptors[sel2], desc3, min(config.K, len(rows3)), config.r)
    else:
        edges = _random_edges(truth_col, len(rows3), config.K, rng)
    if len(edges) == 0:
        return None
    edges = CandidateEdges(sel2[edges.u_index], edges.v_index, edges.distance, edges.nn_rank)
    camera = model.cameras[img.camera_id]
    graph = build_graph(img.xy, index.xyz[rows3], edges, point_refs=index.ids[rows3], camera=camera)
    kp_pid = np.full(img.n_keypoints, -1, dtype=np.int64)
    owned = index.kp_row[image_id] >= 0
    kp_pid[owned] = index.ids[index.kp_row[image_id][owned]]
    labels = (kp_pid[graph.u_ref[graph.edge_u]] == graph.v_ref[graph.edge_v]).astype(np.int8)
    return LabeledGraph(graph, labels, int(np.count_nonzero(truth_col >= 0)))


def select_edges(params, graph, hungarian=True):
    """Final edge selection: Hungarian pooling, or ``w > 0.5`` for networks trained without it."""
    w, _ = forward(params, graph)
    if hungarian:
        return w, hungarian_pooling(graph, w)
    return w, (w > 0.5).astype(np.int8)


@dataclass
class MatcherScore:
    precision: float
    recall: float
    true_selected: int
    selected: int
    true_available: int
    precision_undefined: bool = False


def evaluate_matcher(params, eval_set, hungarian=True):
    """Pooled match precision and recall over labelled graphs."""
    if not eval_set:
        raise ValueError("empty evaluation set")
    ts = sel = avail = 0
    for item in eval_set:
        if isinstance(item, LabeledGraph):
            graph, labels, n_avail = item.graph, item.labels, item.n_true_available
        else:
            graph, labels = item
            n_avail = len(np.unique(graph.edge_u[np.asarray(labels) == 1]))
        _, s = select_edges(params, graph, hungarian)
        ts += int(np.sum((s == 1) & (np.asarray(labels) == 1)))
        sel += int(np.sum(s == 1))
        avail += n_avail
    return MatcherScore(ts / sel if sel else 0.0, ts / avail if avail else 0.0, ts, sel, avail, sel == 0)


@dataclass
class TrainResult:
    params: object
    log: list
    skipped: int = 0


def train(models, config, params=None, progress=None):
    """SGD over per-image training graphs; deterministic per (models, config)."""
    if not models:
        raise ValueError("need at least one model")
    params = params.copy() if params is not None else init_params(config.seed, config.network)
    indices = [TrainingIndex(m) for m in models]
    items = []
    for mi, m in enumerate(models):
        for iid in sorted(m.images):
            try:
                indices[mi].support_rows(iid)
            except NoCovisibleImagesError:
                continue
            items.append((mi, iid))
    if not items:
        raise NoCovisibleImagesError("no image in any model has a covisible neighbour")
    history = []
    skipped = 0
    step = 0
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = np.random.default_rng([config.seed, 7, epoch]).permutation(len(items))
        losses = []
        ts = sel = avail = 0
        acc = None
        in_batch = 0
        for pos in order:
            mi, iid = items[pos]
            lg = make_training_graph(models[mi], iid, config, sample_seed=step, index=indices[mi])
            step += 1
            if lg is None:
                skipped += 1
                continue
            w, cache = forward(params, lg.graph)
            s = hungarian_pooling(lg.graph, w) if config.hungarian else np.ones(lg.graph.T, dtype=np.int8)
            value = loss(w, s, lg.labels)
            if not math.isfinite(value) or not np.all(np.isfinite(w)):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, image {iid} of model {mi}")
            grads = backward(params, cache, s, lg.labels)
            if acc is None:
                acc = grads
            else:
                for k in acc:
                    acc[k] += grads[k]
            in_batch += 1
            if in_batch == config.batch_size:
                params.sgd_step(acc, config.learning_rate / config.batch_size)
                acc, in_batch = None, 0
            losses.append(value)
            chosen = s if config.hungarian else (w > 0.5)
            ts += int(np.sum((chosen == 1) & (lg.labels == 1)))
            sel += int(np.sum(chosen == 1))
            avail += lg.n_true_available
        if acc is not None:
            params.sgd_step(acc, config.learning_rate / in_batch)
        row = {
            "epoch": epoch,
            "mean_loss": float(np.mean(losses)) if losses else float("nan"),
            "precision": ts / sel if sel else 0.0,
            "recall": ts / avail if avail else 0.0,
            "seconds": time.perf_counter() - t0,
        }
        history.append(row)
        log.info("epoch %d loss %.5f precision %.4f recall %.4f", epoch, row["mean_loss"], row["precision"], row["recall"])
        if progress is not None:
            progress(row)
    return TrainResult(params, history, skipped)


def write_log_csv(history, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "mean_loss", "precision", "recall"])
        for row in history:
            writer.writerow([row["epoch"], repr(row["mean_loss"]), repr(row["precision"]), repr(row["recall"])])
