"""Seeded synthetic SfM scenes and query samples with known ground truth.

Scene layout: points are uniform in a cube, each with a random horizontal
surface normal; database cameras sit on a ring around the cube looking at
its centroid. A point is observed when it lies in front of the camera, inside
the image, and faces the camera within ``visibility_angle_deg``. That
gives every image a partial view, so covisibility between ring neighbours
falls off with angular distance.

Global descriptors are a fixed random projection of each view's visibility
indicator (a bag-of-points signature), so retrieval ranks views by overlap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraPose
from .sfm_model import (
    Camera,
    GammFormatError,
    Point3D,
    RegisteredImage,
    _floats,
    _int,
    _Lines,
    _fmt_row,
    make_model,
    parse_header,
    parse_pose,
)


class UnlocalizableSampleError(ValueError):
    pass


@dataclass
class SceneConfig:
    n_points: int = 200
    n_images: int = 24
    descriptor_dim: int = 32
    global_dim: int = 16
    inlier_descriptor_noise: float = 0.05
    distractor_fraction: float = 0.3
    keypoint_noise_px: float = 1.0
    fx: float = 500.0
    fy: float = 500.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480
    extent: float = 10.0
    ring_radius: float = 20.0
    height_jitter: float = 1.0
    visibility_angle_deg: float = 75.0
    image_clutter: int = 10
    global_descriptor_noise: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if min(self.n_points, self.n_images, self.image_clutter) < 0:
            raise ValueError("counts must be non-negative")
        if self.descriptor_dim < 1 or self.global_dim < 1:
            raise ValueError("descriptor dimensions must be positive")
        if not 0.0 <= self.distractor_fraction <= 1.0:
            raise ValueError("distractor_fraction must lie in [0, 1]")
        if min(self.inlier_descriptor_noise, self.keypoint_noise_px, self.height_jitter, self.global_descriptor_noise) < 0:
            raise ValueError("noise levels must be non-negative")
        if self.extent <= 0:
            raise ValueError("extent must be positive")

    def camera(self, camera_id=1):
        return Camera(camera_id, self.fx, self.fy, self.cx, self.cy, self.width, self.height)


@dataclass
class QuerySample:
    xy: np.ndarray
    descriptors: np.ndarray
    global_descriptor: np.ndarray
    gt_pose: CameraPose | None = None
    gt_correspondences: dict = field(default_factory=dict)  # keypoint index -> point id
    camera_id: int = 1
    query_id: int = 0

    @property
    def n_keypoints(self):
        return len(self.xy)


def _unit_rows(rng, n, dim):
    v = rng.normal(size=(n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _renorm(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def distractor_groups(n_points, fraction, rng):
    """Disjoint index groups whose members share one base descriptor.

    ``round(fraction * n_points)`` points take part, in pairs plus one triple
    when the count is odd; a lone leftover point cannot share, so a count of
    one becomes zero.
    """
    n_shared = int(round(fraction * n_points))
    if n_shared < 2:
        return []
    members = rng.permutation(n_points)[:n_shared]
    n_groups = n_shared // 2
    groups = [list(members[2 * g: 2 * g + 2]) for g in range(n_groups)]
    if n_shared % 2:
        groups[-1].append(members[-1])
    return [[int(i) for i in g] for g in groups]


class _SceneState:
    """Everything about a scene that is a function of the config alone."""

    def __init__(self, config):
        if config.ring_radius <= 0:
            raise ValueError("degenerate geometry: cameras placed at the scene centroid")
        self.config = config
        rng = np.random.default_rng([config.seed, 0])
        c = config
        half = c.extent / 2.0
        self.xyz = rng.uniform(-half, half, size=(c.n_points, 3))
        theta = rng.uniform(0.0, 2 * math.pi, size=c.n_points)
        self.normals = np.stack([np.cos(theta), np.sin(theta), np.zeros(c.n_points)], axis=1)
        self.base = _unit_rows(rng, c.n_points, c.descriptor_dim)
        self.groups = distractor_groups(c.n_points, c.distractor_fraction, rng)
        for g in self.groups:
            self.base[g[1:]] = self.base[g[0]]
        phase = rng.uniform(0.0, 2 * math.pi)
        self.poses = []
        for k in range(c.n_images):
            a = phase + 2 * math.pi * k / max(c.n_images, 1)
            center = [c.ring_radius * math.cos(a), c.ring_radius * math.sin(a), rng.uniform(-c.height_jitter, c.height_jitter)]
            self.poses.append(CameraPose.look_at(center, [0.0, 0.0, 0.0]))
        grng = np.random.default_rng([config.seed, 1])
        self.global_projection = grng.normal(size=(c.global_dim, c.n_points))
        self.cos_vis = math.cos(math.radians(c.visibility_angle_deg))

    def visible(self, pose):
        """Indices of points the pose can see, with their exact projections."""
        c = self.config
        Xc = pose.transform(self.xyz)
        z = Xc[:, 2]
        ok = z > 1e-6
        zs = np.where(ok, z, 1.0)
        u = c.fx * Xc[:, 0] / zs + c.cx
        v = c.fy * Xc[:, 1] / zs + c.cy
        ok &= (u >= 0) & (u < c.width) & (v >= 0) & (v < c.height)
        to_cam = pose.center - self.xyz
        to_cam /= np.linalg.norm(to_cam, axis=1, keepdims=True)
        ok &= np.einsum("ij,ij->i", to_cam, self.normals) > self.cos_vis
        idx = np.flatnonzero(ok)
        return idx, np.stack([u[idx], v[idx]], axis=1)

    def global_descriptor(self, visible_idx, rng):
        ind = np.zeros(self.config.n_points)
        ind[visible_idx] = 1.0
        g = self.global_projection @ ind
        if not np.any(g):
            g = np.zeros(self.config.global_dim)
            g[0] = 1.0
        g = g / np.linalg.norm(g)
        if self.config.global_descriptor_noise > 0:
            g = g + rng.normal(scale=self.config.global_descriptor_noise / math.sqrt(len(g)), size=len(g))
            g /= np.linalg.norm(g)
        return g


def _noisy_keypoints(state, idx, uv, rng):
    """Pixel-noised projections and perturbed descriptors; drops points pushed off the image."""
    c = state.config
    xy = uv + rng.normal(scale=c.keypoint_noise_px, size=uv.shape) if c.keypoint_noise_px > 0 else uv.copy()
    desc = state.base[idx]
    if c.inlier_descriptor_noise > 0:
        desc = _renorm(desc + rng.normal(scale=c.inlier_descriptor_noise, size=desc.shape))
    else:
        desc = desc.copy()
    keep = (xy[:, 0] >= 0) & (xy[:, 0] < c.width) & (xy[:, 1] >= 0) & (xy[:, 1] < c.height)
    return idx[keep], xy[keep], desc[keep]


def _clutter(config, n, rng):
    xy = np.stack([rng.uniform(0, config.width, n), rng.uniform(0, config.height, n)], axis=1)
    xy = np.minimum(xy, np.array([np.nextafter(config.width, 0), np.nextafter(config.height, 0)]))
    return xy, _unit_rows(rng, n, config.descriptor_dim)


def generate_scene(config):
    """Build an SfM model; identical configs give identical models."""
    state = _SceneState(config)
    rng = np.random.default_rng([config.seed, 2])
    c = config
    camera = c.camera()
    images = []
    tracks = {i: [] for i in range(c.n_points)}
    for k, pose in enumerate(state.poses):
        image_id = k + 1
        idx, uv = state.visible(pose)
        idx, xy, desc = _noisy_keypoints(state, idx, uv, rng)
        cxy, cdesc = _clutter(c, c.image_clutter, rng)
        all_xy = np.concatenate([xy, cxy])
        all_desc = np.concatenate([desc, cdesc])
        owner = np.concatenate([idx, np.full(len(cxy), -1)])
        order = rng.permutation(len(all_xy))
        all_xy, all_desc, owner = all_xy[order], all_desc[order], owner[order]
        for kp, p in enumerate(owner):
            if p >= 0:
                tracks[int(p)].append((image_id, kp))
        gdesc = state.global_descriptor(idx, rng)
        images.append(RegisteredImage(image_id, camera.id, pose, all_xy, all_desc, gdesc))
    points = [
        Point3D(i + 1, state.xyz[i].copy(), tuple(tracks[i]))
        for i in range(c.n_points)
        if len(tracks[i]) >= 2
    ]
    return make_model([camera], images, points, c.descriptor_dim, c.global_dim)


def generate_query(model, config, clutter_count=0, seed=0, query_id=0):
    """A query view off the database ring with ground-truth correspondences."""
    if clutter_count < 0:
        raise ValueError("clutter_count must be non-negative")
    state = _SceneState(config)
    if model.descriptor_dim != config.descriptor_dim or any(pid > config.n_points for pid in model.points):
        raise ValueError("model was not generated from this config")
    c = config
    rng = np.random.default_rng([config.seed, 3, seed])
    azimuth = rng.uniform(0.0, 2 * math.pi)
    radius = c.ring_radius * rng.uniform(0.75, 1.25)
    center = [radius * math.cos(azimuth), radius * math.sin(azimuth), rng.uniform(-2 * c.height_jitter, 2 * c.height_jitter)]
    target = rng.normal(scale=0.03 * c.extent, size=3)
    pose = CameraPose.look_at(center, target)

    idx, uv = state.visible(pose)
    in_model = np.array([(i + 1) in model.points for i in idx], dtype=bool)
    idx, uv = idx[in_model], uv[in_model]
    idx, xy, desc = _noisy_keypoints(state, idx, uv, rng)
    if len(idx) < 4:
        raise UnlocalizableSampleError(f"query sees only {len(idx)} points")
    cxy, cdesc = _clutter(c, clutter_count, rng)
    all_xy = np.concatenate([xy, cxy])
    all_desc = np.concatenate([desc, cdesc])
    owner = np.concatenate([idx, np.full(clutter_count, -1)])
    order = rng.permutation(len(all_xy))
    all_xy, all_desc, owner = all_xy[order], all_desc[order], owner[order]
    gt = {kp: int(p) + 1 for kp, p in enumerate(owner) if p >= 0}
    return QuerySample(all_xy, all_desc, state.global_descriptor(idx, rng), pose, gt, 1, query_id)


def generate_queries(model, config, n_queries, clutter_count=0, seed=0):
    """``n_queries`` localizable queries; unlocalizable draws are skipped deterministically."""
    out = []
    attempt = 0
    while len(out) < n_queries:
        if attempt > 50 * n_queries + 100:
            raise UnlocalizableSampleError("could not draw enough localizable queries")
        try:
            out.append(generate_query(model, config, clutter_count, seed=seed * 100003 + attempt, query_id=len(out)))
        except UnlocalizableSampleError:
            pass
        attempt += 1
    return out


def pure_clutter_query(config, n_keypoints, seed=0):
    rng = np.random.default_rng([config.seed, 4, seed])
    xy, desc = _clutter(config, n_keypoints, rng)
    g = _unit_rows(rng, 1, config.global_dim)[0]
    return QuerySample(xy, desc, g, None, {}, 1, 0)


# ---------------------------------------------------------------- GAMQ sidecar


def dumps_queries(queries, descriptor_dim, global_dim):
    lines = [f"GAMQ 1 {descriptor_dim} {global_dim}"]
    for q in queries:
        head = f"QUERY {q.query_id} {q.camera_id}"
        if q.gt_pose is not None:
            head += f" {_fmt_row(q.gt_pose.q)} {_fmt_row(q.gt_pose.t)}"
        lines.append(head)
        lines.append("GDESC " + _fmt_row(q.global_descriptor))
        for xy, d in zip(q.xy, q.descriptors):
            lines.append(f"KP {_fmt_row(xy)} {_fmt_row(d)}")
        for kp in sorted(q.gt_correspondences):
            lines.append(f"GT {kp} {q.gt_correspondences[kp]}")
    return "\n".join(lines) + "\n"


def save_queries(queries, path, descriptor_dim, global_dim):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_queries(queries, descriptor_dim, global_dim))


def loads_queries(text):
    lines = _Lines(text)
    D, G = parse_header(lines, "GAMQ")
    out = []
    cur = None

    def finish():
        if cur is None:
            return
        if cur["g"] is None:
            raise GammFormatError(f"query {cur['id']} has no GDESC line", cur["line"])
        n = len(cur["xy"])
        for kp in cur["gt"]:
            if not 0 <= kp < n:
                raise GammFormatError(f"query {cur['id']}: GT keypoint {kp} out of range", cur["line"])
        out.append(
            QuerySample(
                np.array(cur["xy"], dtype=np.float64).reshape(-1, 2),
                np.array(cur["d"], dtype=np.float64).reshape(-1, D),
                cur["g"],
                cur["pose"],
                cur["gt"],
                cur["cam"],
                cur["id"],
            )
        )

    for lineno, tok in lines.items[1:]:
        kind = tok[0]
        if kind == "QUERY":
            finish()
            if len(tok) not in (3, 10):
                raise GammFormatError("QUERY needs id, camera id and an optional 7-value pose", lineno)
            pose = parse_pose(tok[3:], lineno) if len(tok) == 10 else None
            cur = {"id": _int(tok[1], lineno, "query id"), "cam": _int(tok[2], lineno, "camera id"),
                   "pose": pose, "g": None, "xy": [], "d": [], "gt": {}, "line": lineno}
        elif cur is None:
            raise GammFormatError(f"{kind} before any QUERY line", lineno)
        elif kind == "GDESC":
            cur["g"] = _floats(tok[1:], G, lineno, "GDESC")
        elif kind == "KP":
            vals = _floats(tok[1:], 2 + D, lineno, "KP")
            cur["xy"].append(vals[:2])
            cur["d"].append(vals[2:])
        elif kind == "GT":
            if len(tok) != 3:
                raise GammFormatError("GT needs keypoint index and point id", lineno)
            kp = _int(tok[1], lineno, "keypoint index")
            if kp in cur["gt"]:
                raise GammFormatError(f"duplicate GT for keypoint {kp}", lineno)
            cur["gt"][kp] = _int(tok[2], lineno, "point id")
        else:
            raise GammFormatError(f"unknown record {kind!r}", lineno)
    finish()
    return out


def load_queries(path):
    with open(path, encoding="utf-8") as fh:
        return loads_queries(fh.read())
