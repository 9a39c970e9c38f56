"""Held-out synthetic benchmark used for the matcher comparisons and ablations.

Scenes for training and for evaluation come from disjoint seed ranges. The
benchmark raises descriptor noise above the generator default so that the
ratio test rejects a large share of true matches; query clutter is off.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass

from .evaluation import summarize
from .pipeline import LocalizeConfig, localize_batch
from .synthgen import SceneConfig, generate_queries, generate_scene
from .trainer import TrainConfig, train

BENCH_DESCRIPTOR_NOISE = 0.15
EVAL_SEEDS = tuple(range(10))
TRAIN_SEED_BASE = 1000


def bench_scene_config(seed, **overrides):
    base = dict(n_points=200, distractor_fraction=0.3, inlier_descriptor_noise=BENCH_DESCRIPTOR_NOISE, seed=seed)
    base.update(overrides)
    return SceneConfig(**base)


def build_benchmark(seeds=EVAL_SEEDS, n_queries=20, query_seed=1, clutter=0, **overrides):
    """List of (model, queries) pairs, one per scene seed."""
    out = []
    for s in seeds:
        cfg = bench_scene_config(s, **overrides)
        model = generate_scene(cfg)
        out.append((model, generate_queries(model, cfg, n_queries, clutter, seed=query_seed)))
    return out


def training_models(n_scenes=20, **overrides):
    return [generate_scene(bench_scene_config(TRAIN_SEED_BASE + i, **overrides)) for i in range(n_scenes)]


@dataclass
class BenchTraining:
    epochs: int = 40
    n_scenes: int = 20
    learning_rate: float = 0.01
    seed: int = 0


def train_for_benchmark(setup=None, hungarian=True, models=None):
    """Train on the benchmark's training scenes; returns (TrainResult, seconds)."""
    setup = setup or BenchTraining()
    models = models if models is not None else training_models(setup.n_scenes)
    cfg = TrainConfig(learning_rate=setup.learning_rate, epochs=setup.epochs, seed=setup.seed, hungarian=hungarian)
    t0 = time.perf_counter()
    result = train(models, cfg)
    return result, time.perf_counter() - t0


def run_benchmark(benchmark, params, config=None, **changes):
    """Pooled summary (match report, pose report, per-query errors) over every scene."""
    config = dataclasses.replace(config or LocalizeConfig(), **changes)
    results, queries = [], []
    for model, qs in benchmark:
        res, _ = localize_batch(model, params, qs, config=config)
        results += res
        queries += qs
    return summarize(results, queries)
