import dataclasses
import json

import numpy as np
import pytest

from gamloc.bmnet import init_params
from gamloc.geometry import RansacConfig, pose_error
from gamloc.pipeline import LocalizeConfig, localize, localize_batch, result_json
from gamloc.retrieval import expand_scenes, retrieve_images
from gamloc.synthgen import pure_clutter_query


@pytest.fixture(scope="module")
def params():
    return init_params(0)


def test_zero_noise_queries_localize(clean_scene, clean_config, clean_queries, params):
    extent = clean_config.extent
    for q in clean_queries:
        res = localize(clean_scene, params, q)
        assert res.ok
        dt, dr = pose_error(res.pose, q.gt_pose)
        assert dt < 1e-3 * extent and dr < 0.05


def test_pure_clutter_fails(clean_scene, clean_config, params):
    q = pure_clutter_query(clean_config, 60, seed=3)
    # three scenes keep RANSAC's full iteration budget affordable; every scene fails alike
    res = localize(clean_scene, params, q, config=LocalizeConfig(max_scenes=3))
    assert res.status == "failed" and res.pose is None
    assert result_json(res)["qw"] is None


def test_exhaustive_mode_picks_max_inliers(scene, scene_config, params):
    from gamloc.synthgen import generate_query

    q = generate_query(scene, scene_config, clutter_count=20, seed=8)
    cfg = LocalizeConfig(early_stop_inliers=float("inf"), max_scenes=4)
    res = localize(scene, params, q, config=cfg)
    scenes = expand_scenes(scene, retrieve_images(scene, q.global_descriptor, cfg.top_r), cfg.expand_m)
    entries = res.diagnostics["scenes"]
    assert len(entries) == min(4, len(scenes))
    counts = [e.get("inliers", -1) for e in entries]
    assert res.scene_index == int(np.argmax(counts))
    assert res.inlier_count == max(counts)


def test_early_stop_takes_first_qualifying_scene(scene, scene_config, params):
    from gamloc.synthgen import generate_query

    q = generate_query(scene, scene_config, seed=9)
    res = localize(scene, params, q, config=LocalizeConfig(early_stop_inliers=12))
    assert res.ok
    entries = res.diagnostics["scenes"]
    assert res.scene_index == len(entries) - 1
    assert all(e.get("inliers", 0) < 12 for e in entries[:-1])


def test_batch_of_one_and_order_independence(scene, scene_config, params):
    from gamloc.synthgen import generate_queries

    qs = generate_queries(scene, scene_config, 4, clutter_count=10, seed=2)
    single = localize(scene, params, qs[0])
    (one,), _ = localize_batch(scene, params, qs[:1])
    assert json.dumps(result_json(one, True)) == json.dumps(result_json(single, True))
    fwd, _ = localize_batch(scene, params, qs)
    rev, _ = localize_batch(scene, params, qs[::-1])
    assert [result_json(r, True) for r in fwd] == [result_json(r, True) for r in rev[::-1]]
    threaded, _ = localize_batch(scene, params, qs, threads=3)
    assert [result_json(r, True) for r in fwd] == [result_json(r, True) for r in threaded]


def test_baseline_matchers_need_no_params(clean_scene, clean_queries):
    for matcher in ("ratio", "cross", "distance"):
        res = localize(clean_scene, None, clean_queries[0], config=LocalizeConfig(matcher=matcher, baseline_threshold=0.5 if matcher == "distance" else 0.7))
        assert res.ok
    with pytest.raises(ValueError):
        localize(clean_scene, None, clean_queries[0])


def test_config_validation():
    with pytest.raises(ValueError):
        LocalizeConfig(matcher="nope")
    with pytest.raises(ValueError):
        LocalizeConfig(early_stop_inliers=5, ransac=RansacConfig(min_inliers=12))
    with pytest.raises(ValueError):
        LocalizeConfig(K=0)
    assert dataclasses.replace(LocalizeConfig(), K=1).K == 1


def test_timings_cover_every_stage(clean_scene, clean_queries, params):
    res = localize(clean_scene, params, clean_queries[1])
    out = result_json(res)
    assert set(out["timings_ms"]) == {"retrieval", "matching", "bmnet", "ransac", "refine"}
    assert all(v >= 0 for v in out["timings_ms"].values())
    assert set(result_json(res, zero_timings=True)["timings_ms"].values()) == {0.0}
