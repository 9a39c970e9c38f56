"""SfM map data model, the GAMM v1 text format, and derived map quantities."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .geometry import CameraPose

DESCRIPTOR_TOL = 1e-6
ROTATION_TOL = 1e-9


class GammFormatError(ValueError):
    """Malformed GAMM/GAMQ input; carries the 1-based line number."""

    def __init__(self, message, lineno=None):
        self.lineno = lineno
        super().__init__(f"line {lineno}: {message}" if lineno is not None else message)


class IntegrityError(ValueError):
    pass


class DegenerateTrackError(ValueError):
    pass


@dataclass(frozen=True)
class Camera:
    id: int
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise IntegrityError(f"camera {self.id}: focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise IntegrityError(f"camera {self.id}: principal point outside image")


@dataclass(frozen=True, eq=False)
class RegisteredImage:
    """A posed database image. Keypoints are stored column-wise: ``xy`` (K x 2), ``descriptors`` (K x D)."""

    id: int
    camera_id: int
    pose: CameraPose
    xy: np.ndarray
    descriptors: np.ndarray
    global_descriptor: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, RegisteredImage):
            return NotImplemented
        return (
            self.id == other.id
            and self.camera_id == other.camera_id
            and self.pose == other.pose
            and np.array_equal(self.xy, other.xy)
            and np.array_equal(self.descriptors, other.descriptors)
            and np.array_equal(self.global_descriptor, other.global_descriptor)
        )

    @property
    def n_keypoints(self):
        return len(self.xy)


@dataclass(frozen=True, eq=False)
class Point3D:
    id: int
    xyz: np.ndarray
    track: tuple  # ((image_id, keypoint_index), ...)

    def __eq__(self, other):
        if not isinstance(other, Point3D):
            return NotImplemented
        return self.id == other.id and np.array_equal(self.xyz, other.xyz) and self.track == other.track


@dataclass(frozen=True)
class MetaScene:
    image_id: int
    point_ids: frozenset


@dataclass(frozen=True, eq=False)
class SfmModel:
    cameras: dict
    images: dict
    points: dict
    descriptor_dim: int
    global_dim: int
    _validated: bool = field(default=False, repr=False)

    def __post_init__(self):
        if not self._validated:
            validate_model(self)

    def __eq__(self, other):
        if not isinstance(other, SfmModel):
            return NotImplemented
        return (
            self.descriptor_dim == other.descriptor_dim
            and self.global_dim == other.global_dim
            and self.cameras == other.cameras
            and self.images == other.images
            and self.points == other.points
        )

    @cached_property
    def meta_scenes(self):
        scenes = {i: set() for i in self.images}
        for pid, p in self.points.items():
            for image_id, _ in p.track:
                scenes[image_id].add(pid)
        return {i: frozenset(s) for i, s in scenes.items()}

    @cached_property
    def observation_index(self):
        """(image_id, keypoint_index) -> point id."""
        return {obs: pid for pid, p in self.points.items() for obs in p.track}

    @cached_property
    def point_table(self):
        """Sorted point ids with positions and full-track mean descriptors (NaN rows where degenerate)."""
        ids = np.array(sorted(self.points), dtype=np.int64)
        xyz = np.array([self.points[i].xyz for i in ids]).reshape(-1, 3)
        desc = np.full((len(ids), self.descriptor_dim), np.nan)
        for row, pid in enumerate(ids):
            try:
                desc[row] = point_descriptor(self, int(pid))
            except DegenerateTrackError:
                pass
        return PointTable(ids, xyz, desc, {int(p): r for r, p in enumerate(ids)})


@dataclass(frozen=True, eq=False)
class PointTable:
    ids: np.ndarray
    xyz: np.ndarray
    descriptors: np.ndarray
    row_of: dict


def _unit(v, tol):
    return abs(float(np.linalg.norm(v)) - 1.0) < tol


def validate_model(model):
    for cid, cam in model.cameras.items():
        if cid != cam.id:
            raise IntegrityError(f"camera {cid}: key/id mismatch")
    for iid, img in model.images.items():
        if iid != img.id:
            raise IntegrityError(f"image {iid}: key/id mismatch")
        if img.camera_id not in model.cameras:
            raise IntegrityError(f"image {iid} references missing camera {img.camera_id}")
        cam = model.cameras[img.camera_id]
        R = img.pose.R
        if np.max(np.abs(R @ R.T - np.eye(3))) > ROTATION_TOL or abs(np.linalg.det(R) - 1.0) > ROTATION_TOL:
            raise IntegrityError(f"image {iid}: rotation not orthonormal")
        if img.descriptors.shape != (len(img.xy), model.descriptor_dim):
            raise IntegrityError(f"image {iid}: descriptor shape {img.descriptors.shape}")
        if img.global_descriptor.shape != (model.global_dim,) or not _unit(img.global_descriptor, DESCRIPTOR_TOL):
            raise IntegrityError(f"image {iid}: global descriptor must be unit norm of dim {model.global_dim}")
        if len(img.xy):
            norms = np.linalg.norm(img.descriptors, axis=1)
            if np.any(np.abs(norms - 1.0) >= DESCRIPTOR_TOL):
                raise IntegrityError(f"image {iid}: keypoint descriptors must be unit norm")
            x, y = img.xy[:, 0], img.xy[:, 1]
            if np.any(x < 0) or np.any(x >= cam.width) or np.any(y < 0) or np.any(y >= cam.height):
                raise IntegrityError(f"image {iid}: keypoint outside image bounds")
    seen = {}
    for pid, p in model.points.items():
        if pid != p.id:
            raise IntegrityError(f"point {pid}: key/id mismatch")
        if not p.track:
            raise IntegrityError(f"point {pid}: empty track")
        images_in_track = set()
        for image_id, kp in p.track:
            if image_id not in model.images:
                raise IntegrityError(f"point {pid} references missing image {image_id}")
            if not 0 <= kp < model.images[image_id].n_keypoints:
                raise IntegrityError(f"point {pid} references missing keypoint {kp} of image {image_id}")
            if image_id in images_in_track:
                raise IntegrityError(f"point {pid}: image {image_id} observed twice in one track")
            images_in_track.add(image_id)
            if (image_id, kp) in seen:
                raise IntegrityError(
                    f"keypoint {kp} of image {image_id} is in the tracks of points {seen[(image_id, kp)]} and {pid}"
                )
            seen[(image_id, kp)] = pid
    for arr in _all_arrays(model):
        if not np.all(np.isfinite(arr)):
            raise IntegrityError("non-finite value in model")


def _all_arrays(model):
    for img in model.images.values():
        yield img.xy
        yield img.descriptors
        yield img.global_descriptor
        yield img.pose.t
    for p in model.points.values():
        yield p.xyz


def make_model(cameras, images, points, descriptor_dim, global_dim):
    return SfmModel(
        {c.id: c for c in cameras},
        {i.id: i for i in images},
        {p.id: p for p in points},
        int(descriptor_dim),
        int(global_dim),
    )


# ---------------------------------------------------------------- derived quantities


def point_descriptor(model, point_id, exclude_image=None):
    """Re-normalised mean of the track descriptors, optionally leaving one image out."""
    if point_id not in model.points:
        raise KeyError(f"unknown point {point_id}")
    rows = [
        model.images[i].descriptors[k]
        for i, k in model.points[point_id].track
        if exclude_image is None or i != exclude_image
    ]
    if not rows:
        raise DegenerateTrackError(f"point {point_id}: no observations left after excluding image {exclude_image}")
    mean = np.mean(rows, axis=0)
    norm = float(np.linalg.norm(mean))
    if norm < 1e-12:
        raise DegenerateTrackError(f"point {point_id}: track descriptors cancel out (zero-norm mean)")
    return mean / norm


def meta_scene(model, image_id):
    if image_id not in model.images:
        raise KeyError(f"unknown image {image_id}")
    return MetaScene(image_id, model.meta_scenes[image_id])


def covisibility(model, image_a, image_b):
    for i in (image_a, image_b):
        if i not in model.images:
            raise KeyError(f"unknown image {i}")
    return len(model.meta_scenes[image_a] & model.meta_scenes[image_b])


# ---------------------------------------------------------------- GAMM v1 I/O


def fmt(x):
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"cannot serialise non-finite value {x!r}")
    return "%.17g" % x


def _fmt_row(values):
    return " ".join(fmt(v) for v in values)


def dumps_model(model):
    lines = [f"GAMM 1 {model.descriptor_dim} {model.global_dim}"]
    for cid in sorted(model.cameras):
        c = model.cameras[cid]
        lines.append(f"CAMERA {c.id} {_fmt_row([c.fx, c.fy, c.cx, c.cy])} {int(c.width)} {int(c.height)}")
    for iid in sorted(model.images):
        img = model.images[iid]
        lines.append(f"IMAGE {img.id} {img.camera_id} {_fmt_row(img.pose.q)} {_fmt_row(img.pose.t)}")
        lines.append("GDESC " + _fmt_row(img.global_descriptor))
        for xy, d in zip(img.xy, img.descriptors):
            lines.append(f"KP {_fmt_row(xy)} {_fmt_row(d)}")
    for pid in sorted(model.points):
        p = model.points[pid]
        obs = " ".join(f"{i} {k}" for i, k in p.track)
        lines.append(f"POINT {p.id} {_fmt_row(p.xyz)} {len(p.track)} {obs}".rstrip())
    return "\n".join(lines) + "\n"


def save_model(model, path):
    text = dumps_model(model)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


class _Lines:
    """Tokenised, comment-stripped lines with their numbers."""

    def __init__(self, text):
        self.items = []
        for n, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if line:
                self.items.append((n, line.split()))


def _floats(tokens, n, lineno, what):
    if len(tokens) != n:
        raise GammFormatError(f"{what}: expected {n} values, got {len(tokens)}", lineno)
    try:
        vals = np.array([float(t) for t in tokens], dtype=np.float64)
    except ValueError as exc:
        raise GammFormatError(f"{what}: {exc}", lineno) from None
    if not np.all(np.isfinite(vals)):
        raise GammFormatError(f"{what}: non-finite value", lineno)
    return vals


def _int(token, lineno, what):
    try:
        return int(token)
    except ValueError:
        raise GammFormatError(f"{what}: expected integer, got {token!r}", lineno) from None


def parse_header(lines, magic):
    if not lines.items:
        raise GammFormatError("empty file", 1)
    lineno, tok = lines.items[0]
    if len(tok) != 4 or tok[0] != magic or tok[1] != "1":
        raise GammFormatError(f"expected header '{magic} 1 D G'", lineno)
    return _int(tok[2], lineno, "D"), _int(tok[3], lineno, "G")


def parse_pose(tokens, lineno):
    vals = _floats(tokens, 7, lineno, "pose")
    try:
        return CameraPose(vals[:4], vals[4:])
    except ValueError as exc:
        raise GammFormatError(str(exc), lineno) from None


class _ImageBuilder:
    def __init__(self, iid, camera_id, pose, lineno):
        self.id, self.camera_id, self.pose, self.lineno = iid, camera_id, pose, lineno
        self.gdesc = None
        self.xy = []
        self.desc = []

    def build(self, D):
        if self.gdesc is None:
            raise GammFormatError(f"image {self.id} has no GDESC line", self.lineno)
        return RegisteredImage(
            self.id,
            self.camera_id,
            self.pose,
            np.array(self.xy, dtype=np.float64).reshape(-1, 2),
            np.array(self.desc, dtype=np.float64).reshape(-1, D),
            self.gdesc,
        )


def loads_model(text):
    lines = _Lines(text)
    D, G = parse_header(lines, "GAMM")
    cameras, images, points = {}, {}, {}
    current = None
    for lineno, tok in lines.items[1:]:
        kind = tok[0]
        if kind == "CAMERA":
            if len(tok) != 8:
                raise GammFormatError("CAMERA needs 7 fields", lineno)
            cid = _int(tok[1], lineno, "camera id")
            fx, fy, cx, cy = _floats(tok[2:6], 4, lineno, "intrinsics")
            w, h = _int(tok[6], lineno, "width"), _int(tok[7], lineno, "height")
            if cid in cameras:
                raise GammFormatError(f"duplicate camera {cid}", lineno)
            try:
                cameras[cid] = Camera(cid, fx, fy, cx, cy, w, h)
            except IntegrityError as exc:
                raise GammFormatError(str(exc), lineno) from None
            current = None
        elif kind == "IMAGE":
            if len(tok) != 10:
                raise GammFormatError("IMAGE needs 9 fields", lineno)
            iid = _int(tok[1], lineno, "image id")
            if iid in images:
                raise GammFormatError(f"duplicate image {iid}", lineno)
            current = _ImageBuilder(iid, _int(tok[2], lineno, "camera id"), parse_pose(tok[3:10], lineno), lineno)
            images[iid] = current
        elif kind == "GDESC":
            if current is None or current.gdesc is not None:
                raise GammFormatError("GDESC must follow an IMAGE line", lineno)
            current.gdesc = _floats(tok[1:], G, lineno, "GDESC")
        elif kind == "KP":
            if current is None or current.gdesc is None:
                raise GammFormatError("KP must follow an IMAGE's GDESC line", lineno)
            vals = _floats(tok[1:], 2 + D, lineno, "KP")
            current.xy.append(vals[:2])
            current.desc.append(vals[2:])
        elif kind == "POINT":
            if len(tok) < 6:
                raise GammFormatError("POINT needs id, X, Y, Z and n", lineno)
            pid = _int(tok[1], lineno, "point id")
            xyz = _floats(tok[2:5], 3, lineno, "POINT xyz")
            n = _int(tok[5], lineno, "track length")
            obs = tok[6:]
            if n < 0 or len(obs) != 2 * n:
                raise GammFormatError(f"POINT {pid}: track length {n} does not match {len(obs)} tokens", lineno)
            track = tuple((_int(obs[2 * k], lineno, "image id"), _int(obs[2 * k + 1], lineno, "kp index")) for k in range(n))
            if pid in points:
                raise GammFormatError(f"duplicate point {pid}", lineno)
            points[pid] = Point3D(pid, xyz, track)
            current = None
        else:
            raise GammFormatError(f"unknown record {kind!r}", lineno)
    built = {iid: b.build(D) for iid, b in images.items()}
    return SfmModel(cameras, built, points, D, G)


def load_model(path):
    with open(path, encoding="utf-8") as fh:
        return loads_model(fh.read())
