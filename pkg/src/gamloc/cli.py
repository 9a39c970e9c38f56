"""``gamloc`` command line: synth, train, localize, eval, sweep, inspect.

Exit codes: 0 success, 1 usage error, 2 data or parse error, 3 localization failed.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from threadpoolctl import threadpool_limits

from . import evaluation
from .bmnet import MAGIC, BmnetConfig, ParamsFormatError, load_params, save_params
from .geometry import RansacConfig
from .pipeline import MATCHERS, LocalizeConfig, localize_batch, result_json
from .sfm_model import GammFormatError, IntegrityError, load_model, save_model
from .synthgen import SceneConfig, UnlocalizableSampleError, generate_queries, generate_scene, load_queries, save_queries
from .trainer import NoCovisibleImagesError, TrainConfig, TrainingDivergedError, train, write_log_csv

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_FAILED = 0, 1, 2, 3

log = logging.getLogger("gamloc")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _ranged(kind, lo=None, hi=None, lo_open=False):
    def parse(text):
        try:
            v = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"invalid {kind.__name__} value: {text!r}") from None
        if kind is float and v != v:
            raise argparse.ArgumentTypeError("NaN is not allowed")
        if lo is not None and (v <= lo if lo_open else v < lo):
            raise argparse.ArgumentTypeError(f"must be {'>' if lo_open else '>='} {lo}, got {v}")
        if hi is not None and v > hi:
            raise argparse.ArgumentTypeError(f"must be <= {hi}, got {v}")
        return v

    return parse


pos_int = _ranged(int, 1)
nonneg_int = _ranged(int, 0)
pos_float = _ranged(float, 0.0, lo_open=True)
nonneg_float = _ranged(float, 0.0)
unit_float = _ranged(float, 0.0, 1.0)


def _add_common(p):
    p.add_argument("--seed", type=nonneg_int, default=0, help="seed for every stochastic component")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    p.add_argument("--threads", type=pos_int, default=1, help="worker threads for per-query work")


def _add_localize_flags(p):
    p.add_argument("-K", "--k", dest="K", type=pos_int, default=3, help="neighbours per keypoint")
    p.add_argument("-r", "--ratio", dest="r", type=unit_float, default=0.7)
    p.add_argument("--top-r", type=pos_int, default=20)
    p.add_argument("--expand-m", type=pos_int, default=5)
    p.add_argument("--early-stop-inliers", type=pos_int, default=50)
    p.add_argument("--max-scenes", type=pos_int, default=None)
    p.add_argument("--matcher", choices=MATCHERS, default="gam")
    p.add_argument("--baseline-threshold", type=pos_float, default=0.7)
    p.add_argument("--inlier-threshold", type=pos_float, default=8.0, help="RANSAC inlier threshold in pixels")
    p.add_argument("--min-inliers", type=nonneg_int, default=12)
    p.add_argument("--max-iters", type=pos_int, default=10000)
    p.add_argument("--confidence", type=_ranged(float, 0.0, 1.0, lo_open=True), default=0.999)


def build_parser():
    top = _Parser(prog="gamloc", description="Geometry-aided 2D-3D matching and visual localization.")
    sub = top.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic SfM model and query set")
    _add_common(p)
    p.add_argument("--out", required=True, help="model path (.gamm); queries go next to it as .gamq")
    p.add_argument("--queries-out", help="query path (default: --out with a .gamq suffix)")
    p.add_argument("--n-queries", type=nonneg_int, default=20)
    p.add_argument("--query-seed", type=nonneg_int, default=None, help="defaults to --seed")
    p.add_argument("--clutter", type=nonneg_int, default=0, help="clutter keypoints per query")
    p.add_argument("--points", type=pos_int, default=200)
    p.add_argument("--images", type=pos_int, default=24)
    p.add_argument("--descriptor-dim", type=pos_int, default=32)
    p.add_argument("--global-dim", type=pos_int, default=16)
    p.add_argument("--distractors", type=unit_float, default=0.3, help="fraction of points sharing a descriptor")
    p.add_argument("--descriptor-noise", type=nonneg_float, default=0.05)
    p.add_argument("--keypoint-noise", type=nonneg_float, default=1.0, help="pixels")
    p.add_argument("--image-clutter", type=nonneg_int, default=10)

    p = sub.add_parser("train", help="train BMNet on one or more models")
    _add_common(p)
    p.add_argument("--models", "--model", dest="models", nargs="+", action="extend", required=True,
                   help="training models (.gamm); repeatable")
    p.add_argument("--out", required=True, help="parameter file (.bmn)")
    p.add_argument("--log-csv", help="per-epoch loss/precision/recall CSV")
    p.add_argument("--epochs", type=nonneg_int, default=140)
    p.add_argument("--lr", type=nonneg_float, default=0.001)
    p.add_argument("--batch-size", type=pos_int, default=1)
    p.add_argument("--n2d", type=pos_int, default=512)
    p.add_argument("--n3d", type=pos_int, default=512)
    p.add_argument("-K", "--k", dest="K", type=pos_int, default=3)
    p.add_argument("-r", "--ratio", dest="r", type=unit_float, default=0.7)
    p.add_argument("--no-hungarian", action="store_true", help="train every candidate edge (PlainNet ablation)")
    p.add_argument("--random-negatives", action="store_true", help="random instead of kNN-ratio mined negatives")
    p.add_argument("--width", type=pos_int, default=128)
    p.add_argument("--point-blocks", type=pos_int, default=5)
    p.add_argument("--edge-blocks", type=pos_int, default=18)

    p = sub.add_parser("localize", help="localize queries and write result JSON")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--params", help="BMNet parameters (required for gam/plain matchers)")
    p.add_argument("--query", required=True, help="query file (.gamq)")
    p.add_argument("--index", type=nonneg_int, default=None, help="localize only this query of the file")
    p.add_argument("--out", required=True, help="result JSON")
    p.add_argument("--zero-timings", action="store_true", help="write zero timings so outputs are byte-comparable")
    _add_localize_flags(p)

    p = sub.add_parser("eval", help="localize a query set and report match and pose metrics")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--params")
    p.add_argument("--queries", required=True)
    p.add_argument("--out", required=True, help="report JSON")
    _add_localize_flags(p)

    p = sub.add_parser("sweep", help="metrics across values of one hyper-parameter")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--params")
    p.add_argument("--queries", required=True)
    p.add_argument("--axis", required=True, choices=sorted(evaluation.SWEEP_AXES))
    p.add_argument("--values", required=True, help="comma-separated values, e.g. 1,2,3")
    p.add_argument("--out", required=True, help="CSV path")
    _add_localize_flags(p)

    p = sub.add_parser("inspect", help="summarize a .gamm, .gamq or .bmn file")
    _add_common(p)
    p.add_argument("path")
    p.add_argument("--out", help="also write the summary as JSON")
    return top


def _localize_config(a):
    ransac = RansacConfig(a.max_iters, a.inlier_threshold, a.confidence, a.min_inliers, a.seed)
    if a.early_stop_inliers < a.min_inliers:
        raise UsageError("--early-stop-inliers must be at least --min-inliers")
    return LocalizeConfig(
        K=a.K, r=a.r, top_r=a.top_r, expand_m=a.expand_m, ransac=ransac,
        early_stop_inliers=a.early_stop_inliers, max_scenes=a.max_scenes,
        matcher=a.matcher, baseline_threshold=a.baseline_threshold,
    )


def _maybe_params(a):
    if a.matcher in ("gam", "plain"):
        if not a.params:
            raise UsageError(f"--params is required for matcher {a.matcher!r}")
        return load_params(a.params)
    return load_params(a.params) if a.params else None


def cmd_synth(a):
    cfg = SceneConfig(
        n_points=a.points, n_images=a.images, descriptor_dim=a.descriptor_dim, global_dim=a.global_dim,
        inlier_descriptor_noise=a.descriptor_noise, distractor_fraction=a.distractors,
        keypoint_noise_px=a.keypoint_noise, image_clutter=a.image_clutter, seed=a.seed,
    )
    model = generate_scene(cfg)
    qseed = a.seed if a.query_seed is None else a.query_seed
    queries = generate_queries(model, cfg, a.n_queries, a.clutter, seed=qseed) if a.n_queries else []
    qpath = a.queries_out or os.path.splitext(a.out)[0] + ".gamq"
    save_model(model, a.out)
    save_queries(queries, qpath, cfg.descriptor_dim, cfg.global_dim)
    print(f"model: {len(model.images)} images, {len(model.points)} points -> {a.out}")
    print(f"queries: {len(queries)} -> {qpath}")
    return EXIT_OK


def cmd_train(a):
    models = [load_model(p) for p in a.models]
    net = BmnetConfig(a.width, a.point_blocks, a.edge_blocks)
    cfg = TrainConfig(
        learning_rate=a.lr, batch_size=a.batch_size, epochs=a.epochs, n2d=a.n2d, n3d=a.n3d, K=a.K, r=a.r,
        seed=a.seed, hungarian=not a.no_hungarian, mining=not a.random_negatives, network=net,
    )
    result = train(models, cfg)
    save_params(result.params, a.out)
    if a.log_csv:
        write_log_csv(result.log, a.log_csv)
    last = result.log[-1] if result.log else None
    if last:
        print(f"epoch {last['epoch']}: loss {last['mean_loss']:.5f} precision {last['precision']:.4f} recall {last['recall']:.4f}")
    print(f"parameters -> {a.out}")
    return EXIT_OK


def _load_query_subset(path, index):
    queries = load_queries(path)
    if not queries:
        raise ValueError(f"{path}: no queries")
    if index is not None:
        if index >= len(queries):
            raise UsageError(f"--index {index} out of range ({len(queries)} queries)")
        queries = [queries[index]]
    return queries


def cmd_localize(a):
    config = _localize_config(a)
    model = load_model(a.model)
    params = _maybe_params(a)
    queries = _load_query_subset(a.query, a.index)
    results, _ = localize_batch(model, params, queries, config=config, threads=a.threads)
    records = [result_json(r, a.zero_timings) for r in results]
    evaluation.write_json(records[0] if len(records) == 1 else records, a.out)
    for q, r in zip(queries, results):
        print(f"query {q.query_id}: {r.status}, {r.inlier_count} inliers, scene {r.scene_index}")
    return EXIT_OK if all(r.ok for r in results) else EXIT_FAILED


def cmd_eval(a):
    config = _localize_config(a)
    model = load_model(a.model)
    params = _maybe_params(a)
    queries = _load_query_subset(a.queries, None)
    results, summary = localize_batch(model, params, queries, config=config, threads=a.threads)
    report = evaluation.summary_dict(summary)
    report["queries"] = [
        {"query_id": q.query_id, "status": r.status, "inliers": r.inlier_count, "scene_index": r.scene_index,
         "translation_error": e[0], "rotation_error_deg": e[1]}
        for q, r, e in zip(queries, results, summary["errors"])
    ]
    evaluation.write_json(report, a.out)
    print(f"precision {report['precision']:.4f} recall {report['recall']:.4f}")
    print(f"median error {report['median_translation_error']:.4g} / {report['median_rotation_error_deg']:.4g} deg")
    print("recall@ " + ", ".join(f"({x['max_t']:g}, {x['max_r_deg']:g}): {x['fraction']:.3f}" for x in report["recall_at"]))
    return EXIT_OK


def cmd_sweep(a):
    config = _localize_config(a)
    try:
        values = [v for v in a.values.split(",") if v.strip()]
        values = [float(v) if a.axis == "ratio" else int(v) for v in values]
    except ValueError:
        raise UsageError(f"--values must be comma-separated numbers, got {a.values!r}") from None
    if not values:
        raise UsageError("--values is empty")
    model = load_model(a.model)
    params = _maybe_params(a)
    queries = _load_query_subset(a.queries, None)
    rows = evaluation.sweep_report([(model, queries)], params, a.axis, values, config, a.out, threads=a.threads)
    for row in rows:
        print(f"{a.axis}={row['value']}: precision {row['precision']:.4f} recall {row['recall']:.4f}")
    return EXIT_OK


def _inspect(path):
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == MAGIC:
        p = load_params(path)
        c = p.config
        return {"kind": "BMN1", "width": c.width, "point_blocks": c.point_blocks, "edge_blocks": c.edge_blocks,
                "eps": c.eps, "n_parameters": int(p.n_parameters())}
    with open(path, "rb") as fh:
        for raw in fh:
            text = raw.split(b"#", 1)[0].strip()
            if text:
                head = text[:4]
                break
    if head == b"GAMM":
        m = load_model(path)
        return {"kind": "GAMM", "cameras": len(m.cameras), "images": len(m.images), "points": len(m.points),
                "descriptor_dim": m.descriptor_dim, "global_dim": m.global_dim,
                "observations": sum(len(p.track) for p in m.points.values())}
    if head == b"GAMQ":
        qs = load_queries(path)
        return {"kind": "GAMQ", "queries": len(qs), "keypoints": sum(q.n_keypoints for q in qs),
                "with_ground_truth": sum(q.gt_pose is not None for q in qs)}
    raise ValueError(f"{path}: unrecognised file type")


def cmd_inspect(a):
    info = _inspect(a.path)
    for k, v in info.items():
        print(f"{k}: {v}")
    if a.out:
        evaluation.write_json(info, a.out)
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "localize": cmd_localize, "eval": cmd_eval,
            "sweep": cmd_sweep, "inspect": cmd_inspect}


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    try:
        # one BLAS thread keeps float results identical for any --threads
        with threadpool_limits(1):
            return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"gamloc {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GammFormatError, IntegrityError, ParamsFormatError, UnlocalizableSampleError,
            NoCovisibleImagesError, OSError, ValueError, KeyError) as exc:
        print(f"gamloc {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDivergedError as exc:
        print(f"gamloc train: {exc}", file=sys.stderr)
        return EXIT_DATA


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
