"""Camera poses, pinhole projection, P3P, prior-guided RANSAC and pose refinement."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import polynomial as P


class DegenerateConfigurationError(ValueError):
    pass


class BehindCameraError(ValueError):
    pass


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R):
    """Rotation matrix -> unit quaternion (w, x, y, z) with w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    q /= np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    return q


def rotvec_to_matrix(omega):
    theta = float(np.linalg.norm(omega))
    K = np.array([[0, -omega[2], omega[1]], [omega[2], 0, -omega[0]], [-omega[1], omega[0], 0]])
    if theta < 1e-12:
        return np.eye(3) + K
    K /= theta
    return np.eye(3) + math.sin(theta) * K + (1 - math.cos(theta)) * (K @ K)


@dataclass(frozen=True, eq=False)
class CameraPose:
    """World-to-camera rigid transform, ``x_cam = R(q) @ x_world + t``."""

    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64).reshape(4)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(q) - 1.0) >= 1e-9:
            raise ValueError(f"quaternion is not unit norm: |q|={np.linalg.norm(q)!r}")
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(t))):
            raise ValueError("pose contains non-finite values")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)

    @classmethod
    def from_rt(cls, R, t):
        return cls(matrix_to_quat(R), t)

    @classmethod
    def identity(cls):
        return cls(np.array([1.0, 0, 0, 0]), np.zeros(3))

    @classmethod
    def look_at(cls, center, target, up=(0.0, 0.0, 1.0)):
        """Camera at ``center`` looking at ``target``; image y axis points down along -up."""
        center = np.asarray(center, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - center
        z /= np.linalg.norm(z)
        x = np.cross(z, np.asarray(up, dtype=np.float64))
        nx = np.linalg.norm(x)
        if nx < 1e-9:
            raise DegenerateConfigurationError("viewing direction parallel to up vector")
        x /= nx
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        return cls.from_rt(R, -R @ center)

    @property
    def R(self):
        return quat_to_matrix(self.q)

    @property
    def center(self):
        return -self.R.T @ self.t

    def transform(self, X):
        X = np.asarray(X, dtype=np.float64)
        return X @ self.R.T + self.t

    def __eq__(self, other):
        if not isinstance(other, CameraPose):
            return NotImplemented
        return np.array_equal(self.q, other.q) and np.array_equal(self.t, other.t)

    def __repr__(self):
        return f"CameraPose(q={self.q.tolist()}, t={self.t.tolist()})"


def _intrinsics(camera):
    return float(camera.fx), float(camera.fy), float(camera.cx), float(camera.cy)


def project(pose, camera, X):
    """Pinhole projection of world point(s) ``X``; raises if any point is behind the camera."""
    X = np.asarray(X, dtype=np.float64)
    Xc = pose.transform(X)
    z = Xc[..., 2]
    if np.any(z <= 1e-9):
        raise BehindCameraError("point is behind the camera")
    fx, fy, cx, cy = _intrinsics(camera)
    return np.stack([fx * Xc[..., 0] / z + cx, fy * Xc[..., 1] / z + cy], axis=-1)


def reprojection_errors(R, t, camera, pixels, points):
    """Per-correspondence pixel error; ``inf`` for points behind the camera."""
    Xc = points @ R.T + t
    z = Xc[:, 2]
    front = z > 1e-9
    zs = np.where(front, z, 1.0)
    fx, fy, cx, cy = _intrinsics(camera)
    du = fx * Xc[:, 0] / zs + cx - pixels[:, 0]
    dv = fy * Xc[:, 1] / zs + cy - pixels[:, 1]
    err = np.sqrt(du * du + dv * dv)
    err[~front] = np.inf
    return err


def bearings(camera, pixels):
    fx, fy, cx, cy = _intrinsics(camera)
    pixels = np.asarray(pixels, dtype=np.float64)
    f = np.stack([(pixels[:, 0] - cx) / fx, (pixels[:, 1] - cy) / fy, np.ones(len(pixels))], axis=1)
    return f / np.linalg.norm(f, axis=1, keepdims=True)


def _rigid_from_points(world, cam):
    cw = world.mean(axis=0)
    cc = cam.mean(axis=0)
    H = (world - cw).T @ (cam - cc)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return R, cc - R @ cw


def check_triangle(points):
    points = np.asarray(points, dtype=np.float64)
    e1 = points[1] - points[0]
    e2 = points[2] - points[0]
    area = 0.5 * np.linalg.norm(np.cross(e1, e2))
    extent = max(np.linalg.norm(e1), np.linalg.norm(e2), np.linalg.norm(points[2] - points[1]))
    if extent == 0.0 or area <= 1e-9 * extent * extent:
        raise DegenerateConfigurationError("3D points are collinear or coincident")


def p3p(pixels, points, camera):
    """All poses consistent with three 2D-3D correspondences.

    Distances along the three rays are found by eliminating the ray-length
    ratio ``u = s2/s1`` from the law-of-cosines system, which leaves a quartic
    in ``v = s3/s1``. Each positive real root gives a camera-frame triangle that
    is aligned to the world triangle by SVD.
    """
    points = np.asarray(points, dtype=np.float64)
    check_triangle(points)
    return [CameraPose.from_rt(R, t) for R, t in _p3p_rt(bearings(camera, pixels), points)]


def _p3p_rt(f, points):
    p1, p2, p3 = points
    b2 = float(np.dot(p1 - p3, p1 - p3))
    A = float(np.dot(p2 - p3, p2 - p3)) / b2
    C = float(np.dot(p1 - p2, p1 - p2)) / b2
    cos_a = float(np.dot(f[1], f[2]))
    cos_b = float(np.dot(f[0], f[2]))
    cos_g = float(np.dot(f[0], f[1]))

    # coefficient arrays are low -> high degree in v; b^2 scaled to 1
    Q = np.array([1.0, -2.0 * cos_b, 1.0])
    N = P.polyadd(np.array([-1.0, 0.0, 1.0]), (C - A) * Q)
    Dn = np.array([-2.0 * cos_g, 2.0 * cos_a])
    quartic = P.polyadd(
        P.polysub(P.polymul(N, N), 2.0 * cos_g * P.polymul(N, Dn)),
        P.polymul(P.polysub(np.array([1.0]), C * Q), P.polymul(Dn, Dn)),
    )
    roots = P.polyroots(quartic)
    dquartic = P.polyder(quartic)
    out = []
    for root in roots:
        if abs(root.imag) > 1e-6 * max(1.0, abs(root.real)):
            continue
        v = root.real
        for _ in range(3):
            d = P.polyval(v, dquartic)
            if d == 0.0:
                break
            v -= P.polyval(v, quartic) / d
        den = P.polyval(v, Dn)
        q = P.polyval(v, Q)
        if abs(den) < 1e-12 or q <= 0 or v <= 0:
            continue
        u = P.polyval(v, N) / den
        if u <= 0:
            continue
        s1 = math.sqrt(b2 / q)
        cam = np.stack([s1 * f[0], u * s1 * f[1], v * s1 * f[2]])
        R, t = _rigid_from_points(points, cam)
        key = np.concatenate([R.ravel(), t])
        if any(np.allclose(key, np.concatenate([R0.ravel(), t0]), atol=1e-10) for R0, t0 in out):
            continue
        out.append((R, t))
    return out


@dataclass
class RansacConfig:
    max_iterations: int = 10000
    inlier_threshold_px: float = 8.0
    confidence: float = 0.999
    min_inliers: int = 12
    seed: int = 0

    def __post_init__(self):
        if self.inlier_threshold_px <= 0:
            raise ValueError("inlier threshold must be positive")
        if not 0.0 < self.confidence < 1.0:
            raise ValueError("confidence must lie in (0, 1)")
        if self.max_iterations < 1 or self.min_inliers < 0:
            raise ValueError("invalid iteration or inlier count")


@dataclass
class RansacResult:
    pose: CameraPose | None
    inliers: np.ndarray
    iterations: int
    first_success_iteration: int | None
    success: bool
    best_inlier_count: int = 0
    diagnostics: dict = field(default_factory=dict)


def sample_triples(weights, n_iter, rng):
    """Index triples drawn without replacement, probability proportional to ``weights``.

    Uses Gumbel top-k, which is distributionally identical to sequential
    draws with renormalisation after each pick.
    """
    n = len(weights)
    w = np.asarray(weights, dtype=np.float64)
    if np.count_nonzero(w > 0) < 3 or np.all(w == w[0]):
        logw = np.zeros(n)
    else:
        with np.errstate(divide="ignore"):
            logw = np.log(np.clip(w, 0.0, None))
    keys = logw + rng.gumbel(size=(n_iter, n))
    top = np.argpartition(-keys, 2, axis=1)[:, :3]
    order = np.argsort(-np.take_along_axis(keys, top, axis=1), axis=1)
    return np.take_along_axis(top, order, axis=1)


def ransac_pnp(pixels, points, weights, camera, config=None):
    """Robust absolute pose with prior-guided minimal sampling."""
    config = config or RansacConfig()
    pixels = np.asarray(pixels, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    n = len(pixels)
    if n < 4:
        raise ValueError(f"need at least 4 correspondences, got {n}")
    if weights is None:
        weights = np.ones(n)
    weights = np.asarray(weights, dtype=np.float64)
    if len(weights) != n or len(points) != n:
        raise ValueError("pixels, points and weights must have equal length")

    rng = np.random.default_rng(config.seed)
    f = bearings(camera, pixels)
    thr = config.inlier_threshold_px
    best_count = 0
    best_pose = None
    best_mask = np.zeros(n, dtype=bool)
    first_success = None
    bound = config.max_iterations
    it = 0
    chunk = 256
    degenerate = 0
    log_fail = math.log(1.0 - config.confidence)
    while it < min(bound, config.max_iterations):
        triples = sample_triples(weights, chunk, rng)
        for tri in triples:
            if it >= min(bound, config.max_iterations):
                break
            it += 1
            pts = points[tri]
            try:
                check_triangle(pts)
            except DegenerateConfigurationError:
                degenerate += 1
                continue
            for R, t in _p3p_candidates(f[tri], pts):
                err = reprojection_errors(R, t, camera, pixels, points)
                mask = err < thr
                count = int(mask.sum())
                if count > best_count:
                    best_count = count
                    best_pose = (R, t)
                    best_mask = mask
                    ratio = count / n
                    if ratio >= 1.0:
                        bound = it
                    else:
                        denom = math.log(max(1e-300, 1.0 - ratio ** 3))
                        bound = it if denom == 0 else min(bound, int(math.ceil(log_fail / denom)) if denom < 0 else bound)
            if first_success is None and best_count >= max(config.min_inliers, 3) and best_pose is not None:
                first_success = it
    success = best_pose is not None and best_count >= config.min_inliers
    pose = CameraPose.from_rt(*best_pose) if best_pose is not None else None
    return RansacResult(
        pose=pose if success else None,
        inliers=best_mask if success else np.zeros(n, dtype=bool),
        iterations=it,
        first_success_iteration=first_success,
        success=success,
        best_inlier_count=best_count,
        diagnostics={"degenerate_samples": degenerate, "best_hypothesis": pose},
    )


def _p3p_candidates(f, pts):
    try:
        return _p3p_rt(f, pts)
    except (np.linalg.LinAlgError, ZeroDivisionError):
        return []


@dataclass
class RefineResult:
    pose: CameraPose
    iterations: int
    initial_cost: float
    final_cost: float
    degenerate: bool = False


def _cost(R, t, camera, pixels, points):
    e = reprojection_errors(R, t, camera, pixels, points)
    return float(np.sum(e * e))


def refine_pose(pose, pixels, points, camera, max_iterations=100, step_tol=1e-10):
    """Gauss-Newton on summed squared reprojection error.

    The update is ``R <- exp(w) R``, ``t <- exp(w) t + dt``; a step that does not
    lower the cost is halved until it does (or is abandoned).
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    if len(pixels) < 4:
        raise ValueError("refinement needs at least 4 correspondences")
    fx, fy, cx, cy = _intrinsics(camera)
    R, t = pose.R, pose.t.copy()
    cost0 = cost = _cost(R, t, camera, pixels, points)
    if not math.isfinite(cost0):
        return RefineResult(pose, 0, cost0, cost0, degenerate=True)
    it = 0
    for it in range(1, max_iterations + 1):
        Xc = points @ R.T + t
        x, y, z = Xc[:, 0], Xc[:, 1], Xc[:, 2]
        r = np.concatenate([fx * x / z + cx - pixels[:, 0], fy * y / z + cy - pixels[:, 1]])
        n = len(z)
        Jp = np.zeros((2 * n, 3))
        Jp[:n, 0] = fx / z
        Jp[:n, 2] = -fx * x / (z * z)
        Jp[n:, 1] = fy / z
        Jp[n:, 2] = -fy * y / (z * z)
        # d x_cam / d omega = -[x_cam]_x
        J = np.zeros((2 * n, 6))
        for rows, jp in ((slice(0, n), Jp[:n]), (slice(n, 2 * n), Jp[n:])):
            J[rows, 0] = jp[:, 1] * (-z) + jp[:, 2] * y
            J[rows, 1] = jp[:, 0] * z + jp[:, 2] * (-x)
            J[rows, 2] = jp[:, 0] * (-y) + jp[:, 1] * x
            J[rows, 3:] = jp
        H = J.T @ J
        g = J.T @ r
        if np.linalg.cond(H) > 1e12:
            return RefineResult(pose, it, cost0, cost0, degenerate=True)
        delta = -np.linalg.solve(H, g)
        if np.linalg.norm(delta) < step_tol:
            break
        accepted = False
        step = delta
        for _ in range(30):
            dR = rotvec_to_matrix(step[:3])
            U, _, Vt = np.linalg.svd(dR)
            dR = U @ Vt
            R_new = dR @ R
            t_new = dR @ t + step[3:]
            c_new = _cost(R_new, t_new, camera, pixels, points)
            if c_new < cost:
                accepted = True
                break
            step = step * 0.5
        if not accepted:
            break
        R, t, cost = R_new, t_new, c_new
        if np.linalg.norm(step) < step_tol:
            break
    if cost >= cost0:
        return RefineResult(pose, it, cost0, cost0)
    return RefineResult(CameraPose.from_rt(R, t), it, cost0, cost)


def rotation_angle_deg(R):
    q = matrix_to_quat(R)
    return math.degrees(2.0 * math.atan2(np.linalg.norm(q[1:]), abs(q[0])))


def pose_error(estimated, ground_truth):
    """(camera-center distance, relative rotation angle in degrees)."""
    dt = float(np.linalg.norm(estimated.center - ground_truth.center))
    dr = rotation_angle_deg(estimated.R @ ground_truth.R.T)
    return dt, dr
