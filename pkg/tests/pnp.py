"""Synthetic 2D-3D correspondence sets with a known pose."""

import numpy as np

from gamloc.geometry import CameraPose, project
from gamloc.synthgen import SceneConfig

EXTENT = 10.0
CAMERA = SceneConfig().camera()


def known_pose(rng):
    ang = rng.uniform(0, 2 * np.pi)
    center = np.array([20 * np.cos(ang), 20 * np.sin(ang), rng.uniform(-1, 1)])
    return CameraPose.look_at(center, rng.normal(scale=0.5, size=3))


def pnp_problem(seed, n_in=50, n_out=50):
    """(pose, pixels, points, inlier mask); outliers pair random pixels with random points."""
    rng = np.random.default_rng(seed)
    pose = known_pose(rng)
    pts = rng.uniform(-EXTENT / 2, EXTENT / 2, size=(n_in + n_out, 3))
    px = project(pose, CAMERA, pts)
    px[n_in:] = rng.uniform([0, 0], [CAMERA.width, CAMERA.height], size=(n_out, 2))
    mask = np.zeros(n_in + n_out, dtype=bool)
    mask[:n_in] = True
    order = rng.permutation(n_in + n_out)
    return pose, px[order], pts[order], mask[order]
