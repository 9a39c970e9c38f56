"""Coarse localization: global-descriptor retrieval and covisibility scene expansion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RetrievalResult:
    ranked_images: tuple  # ((image_id, score), ...), scores non-increasing

    @property
    def image_ids(self):
        return [i for i, _ in self.ranked_images]


@dataclass(frozen=True)
class ExpandedScene:
    anchor_image: int
    member_images: tuple
    point_ids: frozenset


def retrieve_images(model, query_global, R):
    """Top ``R`` database images by cosine similarity; ties go to the lower image id."""
    if R <= 0:
        raise ValueError("R must be positive")
    if not model.images:
        raise ValueError("model has no images")
    g = np.asarray(query_global, dtype=np.float64)
    if g.shape != (model.global_dim,):
        raise ValueError(f"expected a global descriptor of length {model.global_dim}, got shape {g.shape}")
    ids = np.array(sorted(model.images), dtype=np.int64)
    G = np.stack([model.images[int(i)].global_descriptor for i in ids])
    scores = G @ g
    order = np.lexsort((ids, -scores))[:R]
    return RetrievalResult(tuple((int(ids[k]), float(scores[k])) for k in order))


def expand_scenes(model, retrieved, m):
    """Merge each retrieved image with its ``m - 1`` most covisible neighbours.

    An anchor already listed as a member of an earlier scene is skipped, and
    images placed in earlier scenes are not offered again as neighbours.
    """
    if m < 1:
        raise ValueError("m must be at least 1")
    scenes = model.meta_scenes
    seen = set()
    out = []
    for anchor, _ in retrieved.ranked_images:
        if anchor in seen:
            continue
        mine = scenes[anchor]
        beta = []
        for j in sorted(scenes):
            if j == anchor or j in seen:
                continue
            b = len(mine & scenes[j])
            if b > 0:
                beta.append((-b, j))
        beta.sort()
        members = (anchor,) + tuple(j for _, j in beta[: m - 1])
        pts = frozenset().union(*(scenes[j] for j in members))
        out.append(ExpandedScene(anchor, members, pts))
        seen.update(members)
    return out
