"""Acceptance criteria, each at its stated tolerance, one summary line per criterion.

Criteria 5 to 7 train BMNet twice (with and without Hungarian pooling) on the
held-out synthetic benchmark, which takes several minutes per network.
"""

import math
import time

import numpy as np
import pytest

from gamloc import experiments
from gamloc.bmnet import dumps_params, forward, init_params, loads_params, loss, loss_logit_grad
from gamloc.cli import run
from gamloc.geometry import RansacConfig, pose_error, ransac_pnp
from gamloc.hungarian import hungarian_pooling, match_edges, rematching_margin
from gamloc.matcher import knn_ratio_match
from gamloc.pipeline import LocalizeConfig, localize
from gamloc.sfm_model import dumps_model, loads_model
from tests.conftest import ACCEPTANCE, random_unit
from tests.gradcheck import GRAD_NET, check_all_parameters, frozen_targets, random_graph, randomized_params
from tests.pnp import CAMERA, EXTENT, pnp_problem


def report(n, title, passed, detail):
    line = f"criterion {n:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE[n] = (passed, line)
    print(line)
    assert passed, line


# ---------------------------------------------------------------- 1. Hungarian optimality


def best_matching_weight(eu, ev, w):
    """Exhaustive search over one-to-one edge subsets, branching edge by edge."""
    T = len(w)

    def go(k, used_u, used_v):
        if k == T:
            return 0.0
        best = go(k + 1, used_u, used_v)
        if eu[k] not in used_u and ev[k] not in used_v:
            best = max(best, w[k] + go(k + 1, used_u | {eu[k]}, used_v | {ev[k]}))
        return best

    return go(0, frozenset(), frozenset())


def test_c01_hungarian_optimality():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(500):
        M, N = int(rng.integers(1, 7)), int(rng.integers(1, 7))
        T = int(rng.integers(1, min(12, M * N) + 1))
        cells = rng.choice(M * N, T, replace=False)
        eu, ev = (cells // N).tolist(), (cells % N).tolist()
        w = rng.uniform(0, 1, T)
        s = match_edges(eu, ev, w, M, N)
        worst = max(worst, abs(float(w[s == 1].sum()) - best_matching_weight(eu, ev, w.tolist())))
    broken = 0
    for _ in range(10_000):
        M, N = int(rng.integers(5, 40)), int(rng.integers(5, 40))
        T = int(rng.integers(13, min(120, M * N) + 1))
        cells = rng.choice(M * N, T, replace=False)
        eu, ev = cells // N, cells % N
        s = match_edges(eu, ev, rng.uniform(0, 1, T), M, N) == 1
        broken += len(np.unique(eu[s])) != s.sum() or len(np.unique(ev[s])) != s.sum()
    secs = time.perf_counter() - t0
    ok = worst <= 1e-12 and broken == 0 and secs < 10
    report(1, "Hungarian optimality", ok,
           f"max |pool - brute| {worst:.1e} over 500 graphs, {broken} one-to-one violations in 10k, {secs:.1f}s")


# ---------------------------------------------------------------- 2. gradients


def gradient_sweep(stencil):
    rng = np.random.default_rng(202)
    worst, entries, shrunk = 0.0, 0, 0
    for i in range(100):
        graph = random_graph(rng, max_edges=20, camera=CAMERA if i % 2 else None)
        params = randomized_params(rng, GRAD_NET)
        s, t = frozen_targets(params, graph, rng)
        w, n, k = check_all_parameters(params, graph, s, t, h=1e-4, stencil=stencil)
        worst, entries, shrunk = max(worst, w), entries + n, shrunk + k
    return worst, entries, shrunk


def test_c02_gradient_correctness():
    t0 = time.perf_counter()
    worst, entries, shrunk = gradient_sweep(stencil=5)
    secs = time.perf_counter() - t0
    # the 3-point stencil's O(h^2) truncation error is reported alongside, not asserted
    worst3, _, _ = gradient_sweep(stencil=3)
    ok = worst < 1e-4 and secs < 60
    report(2, "gradient correctness", ok,
           f"max rel err {worst:.2e} (5-point central, h=1e-4) over {entries} entries of 100 graphs, "
           f"step reduced at {shrunk} ReLU kinks, {secs:.1f}s; 3-point central gives {worst3:.2e}")


# ---------------------------------------------------------------- 3. gate


def test_c03_gate():
    rng = np.random.default_rng(303)
    params = init_params(3)
    trials = changed = 0
    while trials < 100:
        g = random_graph(rng, max_edges=20)
        w, _ = forward(params, g)
        s = hungarian_pooling(g, w)
        t = rng.integers(0, 2, g.T)
        free = np.flatnonzero(s == 0)
        if len(free) == 0:
            continue
        k = int(rng.choice(free))
        margin = rematching_margin(g.edge_u, g.edge_v, w, k)
        if margin <= 1e-9:
            continue
        w2 = w.copy()
        w2[k] = rng.uniform(0.0, min(1.0, w[k] + margin))
        w2[k] = min(w2[k], w[k] + 0.999 * margin)
        s2 = hungarian_pooling(g, w2)
        same = np.array_equal(s, s2) and loss(w2, s2, t) == loss(w, s, t)
        same = same and loss_logit_grad(w2, s2, t)[k] == 0.0
        changed += not same
        trials += 1
    report(3, "gate on unselected edges", changed == 0, f"{changed} of {trials} perturbations changed s or the loss")


# ---------------------------------------------------------------- 4. kNN-ratio limits


def oracle_distances(A, B):
    return np.linalg.norm(A[:, None, :] - B[None, :, :], axis=2)


def test_c04_knn_ratio_limits():
    rng = np.random.default_rng(404)
    bad = 0
    for i in range(50):
        M, N, D = int(rng.integers(1, 30)), int(rng.integers(3, 40)), int(rng.integers(2, 16))
        A, B = random_unit(rng, M, D), random_unit(rng, N, D)
        if i % 5 == 0:
            B[1] = B[0]  # an exact tie
            A[0] = B[0]
        K = int(rng.integers(1, min(N, 5) + 1))
        d = oracle_distances(A, B)
        order = np.argsort(d, axis=1, kind="stable")[:, :K]
        full = {(u, int(v)) for u in range(M) for v in order[u]}
        nn = {(u, v) for u in range(M) for v in range(N) if d[u, v] == d[u].min() and (u, v) in full}
        for r, want in ((1.0, nn), (0.0, full)):
            got = set(knn_ratio_match(A, B, K, r).pairs())
            bad += got != want
    report(4, "kNN-ratio limits", bad == 0, f"{bad} mismatches over 50 sets x (r=1, r=0)")


# ---------------------------------------------------------------- 5 to 7. synthetic benchmark


@pytest.fixture(scope="module")
def benchmark():
    return experiments.build_benchmark()


@pytest.fixture(scope="module")
def training_scenes():
    return experiments.training_models()


@pytest.fixture(scope="module")
def gam(training_scenes):
    return experiments.train_for_benchmark(hungarian=True, models=training_scenes)


@pytest.fixture(scope="module")
def gam_summary(benchmark, gam):
    return experiments.run_benchmark(benchmark, gam[0].params)


def fmt(s):
    m, p = s["match"], s["pose"]
    return f"P {100 * m.precision:.1f} / R {100 * m.recall:.1f} / med t {p.median_translation:.4f}"


@pytest.mark.slow
def test_c05_gam_beats_ratio_test(benchmark, gam, gam_summary):
    ratio = experiments.run_benchmark(benchmark, None, matcher="ratio", baseline_threshold=0.7)
    g, b = gam_summary["match"], ratio["match"]
    gt, bt = gam_summary["pose"].median_translation, ratio["pose"].median_translation
    secs = gam[1]
    checks = [g.recall >= 1.3 * b.recall, g.precision >= b.precision - 0.05, gt <= bt, secs <= 30 * 60]
    report(5, "GAM vs NN+ratio", all(checks),
           f"GAM {fmt(gam_summary)}; ratio {fmt(ratio)}; recall x{g.recall / max(b.recall, 1e-12):.2f}; "
           f"training {secs:.0f}s")


@pytest.mark.slow
def test_c06_k_sweep(benchmark, gam, gam_summary):
    k1 = experiments.run_benchmark(benchmark, gam[0].params, K=1)
    a, b = gam_summary["match"], k1["match"]
    ok = a.recall > b.recall and a.precision >= b.precision - 0.05
    report(6, "k sweep", ok, f"k=3 {fmt(gam_summary)}; k=1 {fmt(k1)}")


@pytest.mark.slow
def test_c07_hungarian_ablation(benchmark, training_scenes, gam_summary):
    plain, secs = experiments.train_for_benchmark(hungarian=False, models=training_scenes)
    s = experiments.run_benchmark(benchmark, plain.params, matcher="plain")
    ok = s["match"].precision < gam_summary["match"].precision
    report(7, "Hungarian pooling ablation", ok, f"PlainNet {fmt(s)} ({secs:.0f}s training); GAM {fmt(gam_summary)}")


# ---------------------------------------------------------------- 8. RANSAC


def test_c08_ransac():
    recovered = 0
    for seed in range(100):
        pose, px, pts, _ = pnp_problem(seed)
        res = ransac_pnp(px, pts, None, CAMERA, RansacConfig(inlier_threshold_px=8.0, seed=seed))
        if res.success:
            dt, dr = pose_error(res.pose, pose)
            recovered += dr <= 0.1 and dt <= 0.01 * EXTENT and res.inliers.sum() >= 50
    guided, uniform = [], []
    for seed in range(200):
        _, px, pts, mask = pnp_problem(10_000 + seed)
        cfg = RansacConfig(seed=seed)
        guided.append(ransac_pnp(px, pts, np.where(mask, 1.0, 1e-3), CAMERA, cfg).first_success_iteration)
        uniform.append(ransac_pnp(px, pts, np.ones(len(px)), CAMERA, cfg).first_success_iteration)
    missing = sum(x is None for x in guided + uniform)
    mg = float(np.median([math.inf if x is None else x for x in guided]))
    mu = float(np.median([math.inf if x is None else x for x in uniform]))
    ok = recovered >= 99 and mg < mu
    report(8, "robust pose recovery", ok,
           f"{recovered}/100 seeds within 0.1 deg / 1% extent; median first success {mg:g} guided vs {mu:g} uniform"
           f" ({missing} runs without success)")


# ---------------------------------------------------------------- 9. end to end


@pytest.mark.slow
def test_c09_end_to_end(clean_scene, clean_config, clean_queries, gam):
    params = gam[0].params
    good, worst_t, worst_r = 0, 0.0, 0.0
    for q in clean_queries:
        res = localize(clean_scene, params, q, config=LocalizeConfig())
        if res.ok:
            dt, dr = pose_error(res.pose, q.gt_pose)
            worst_t, worst_r = max(worst_t, dt), max(worst_r, dr)
            good += dt <= 1e-3 * clean_config.extent and dr <= 0.05
    report(9, "end-to-end oracle", good == len(clean_queries) == 20,
           f"{good}/20 queries; worst error {worst_t:.2e} / {worst_r:.2e} deg")


# ---------------------------------------------------------------- 10. determinism


def run_twice(tmp_path, make_args, outputs):
    blobs = []
    for rep in ("a", "b"):
        d = tmp_path / rep
        d.mkdir(parents=True, exist_ok=True)
        code = run(make_args(d))
        blobs.append((code, [(d / o).read_bytes() for o in outputs]))
    return blobs[0] == blobs[1] and blobs[0][0] in (0, 3)


def test_c10_determinism(tmp_path):
    src = tmp_path / "src"
    src.mkdir()
    small = ["--points", "80", "--images", "10", "--n-queries", "5", "--clutter", "10", "--seed", "7"]
    assert run(["synth", "--out", str(src / "s.gamm")] + small) == 0
    assert run(["train", "--models", str(src / "s.gamm"), "--out", str(src / "p.bmn"), "--epochs", "1",
                "--width", "16", "--point-blocks", "2", "--edge-blocks", "4"]) == 0
    data = ["--model", str(src / "s.gamm"), "--params", str(src / "p.bmn")]
    commands = {
        "synth": (lambda d: ["synth", "--out", str(d / "s.gamm")] + small, ["s.gamm", "s.gamq"]),
        "train": (lambda d: ["train", "--models", str(src / "s.gamm"), "--out", str(d / "p.bmn"),
                             "--log-csv", str(d / "log.csv"), "--epochs", "2", "--width", "16",
                             "--point-blocks", "2", "--edge-blocks", "4", "--seed", "3"], ["p.bmn", "log.csv"]),
        "localize": (lambda d: ["localize"] + data + ["--query", str(src / "s.gamq"), "--out", str(d / "r.json"),
                                                      "--zero-timings"], ["r.json"]),
        "eval": (lambda d: ["eval"] + data + ["--queries", str(src / "s.gamq"), "--out", str(d / "e.json")],
                 ["e.json"]),
        "sweep": (lambda d: ["sweep"] + data + ["--queries", str(src / "s.gamq"), "--axis", "k", "--values", "1,2",
                                                "--out", str(d / "k.csv")], ["k.csv"]),
        "inspect": (lambda d: ["inspect", str(src / "s.gamm"), "--out", str(d / "i.json")], ["i.json"]),
    }
    unstable = [name for name, (args, outs) in commands.items() if not run_twice(tmp_path / name, args, outs)]
    text = (src / "s.gamm").read_text()
    gamm_ok = dumps_model(loads_model(text)) == text
    blob = (src / "p.bmn").read_bytes()
    bmn_ok = dumps_params(loads_params(blob)) == blob
    ok = not unstable and gamm_ok and bmn_ok
    report(10, "determinism and round trips", ok,
           f"{len(commands) - len(unstable)}/{len(commands)} subcommands bit-identical"
           f"{' (unstable: ' + ', '.join(unstable) + ')' if unstable else ''}; GAMM round trip {gamm_ok}; "
           f"BMN1 round trip {bmn_ok}")
