"""Match and pose metrics, recall at accuracy thresholds, and sweep reports."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass

import numpy as np

from .geometry import pose_error

DEFAULT_THRESHOLDS = ((0.25, 2.0), (0.5, 5.0), (5.0, 10.0))
SWEEP_AXES = {"k": "K", "ratio": "r", "top_r": "top_r", "m": "expand_m"}


@dataclass(frozen=True)
class MatchReport:
    precision: float
    recall: float
    true_selected: int
    selected: int
    true_available: int

    @property
    def precision_undefined(self):
        return self.selected == 0

    def __add__(self, other):
        return MatchReport.from_counts(
            self.true_selected + other.true_selected,
            self.selected + other.selected,
            self.true_available + other.true_available,
        )

    @classmethod
    def from_counts(cls, true_selected, selected, true_available):
        p = true_selected / selected if selected else 0.0
        r = true_selected / true_available if true_available else 0.0
        return cls(p, r, int(true_selected), int(selected), int(true_available))


@dataclass(frozen=True)
class PoseReport:
    median_translation: float
    median_rotation: float
    recalls: tuple  # ((max_t, max_r, fraction), ...)
    n_queries: int
    n_failed: int


def match_metrics(selected, gt_correspondences):
    """``selected``: iterable of (keypoint index, point id); ``gt``: keypoint -> point id.

    Recall is over every keypoint with a true partner in the model.
    """
    pairs = [(int(k), int(p)) for k, p in selected]
    true_sel = sum(1 for k, p in pairs if gt_correspondences.get(k) == p)
    return MatchReport.from_counts(true_sel, len(pairs), len(gt_correspondences))


def pool_match_reports(reports):
    out = MatchReport.from_counts(0, 0, 0)
    for r in reports:
        out = out + r
    return out


def recall_at(errors, thresholds=DEFAULT_THRESHOLDS):
    """Fraction of (translation, rotation) errors within each threshold pair; failures are ``inf``."""
    errors = list(errors)
    if not errors:
        raise ValueError("no pose errors given")
    e = np.array(errors, dtype=np.float64).reshape(-1, 2)
    e = np.where(np.isnan(e), np.inf, e)
    return tuple(float(np.mean((e[:, 0] <= t) & (e[:, 1] <= r))) for t, r in thresholds)


def query_pose_error(result, gt_pose):
    if result.pose is None or gt_pose is None:
        return (math.inf, math.inf)
    return pose_error(result.pose, gt_pose)


def pose_report(errors, thresholds=DEFAULT_THRESHOLDS):
    errors = [tuple(e) for e in errors]
    e = np.array(errors, dtype=np.float64).reshape(-1, 2)
    fr = recall_at(errors, thresholds)
    return PoseReport(
        float(np.median(e[:, 0])),
        float(np.median(e[:, 1])),
        tuple((t, r, f) for (t, r), f in zip(thresholds, fr)),
        len(errors),
        int(np.sum(~np.isfinite(e[:, 0]))),
    )


def summarize(results, queries, thresholds=DEFAULT_THRESHOLDS):
    """Pooled match report and pose report for localization results paired with their queries."""
    matches = pool_match_reports(match_metrics(r.matches, q.gt_correspondences) for r, q in zip(results, queries))
    errors = [query_pose_error(r, q.gt_pose) for r, q in zip(results, queries)]
    return {"match": matches, "pose": pose_report(errors, thresholds), "errors": errors}


def summary_dict(summary):
    m, p = summary["match"], summary["pose"]
    return {
        "precision": m.precision,
        "recall": m.recall,
        "true_selected": m.true_selected,
        "selected": m.selected,
        "true_available": m.true_available,
        "median_translation_error": p.median_translation,
        "median_rotation_error_deg": p.median_rotation,
        "recall_at": [{"max_t": t, "max_r_deg": r, "fraction": f} for t, r, f in p.recalls],
        "n_queries": p.n_queries,
        "n_failed": p.n_failed,
    }


def _json_safe(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None if math.isnan(x) else ("inf" if x > 0 else "-inf")
    if isinstance(x, dict):
        return {k: _json_safe(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_json_safe(v) for v in x]
    return x


def write_json(obj, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(_json_safe(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def sweep_report(benchmark, params, axis, values, config, out_csv=None, thresholds=DEFAULT_THRESHOLDS, threads=1):
    """One localize_batch per value of ``axis`` over ``benchmark``, a list of (model, queries).

    A bare model may be passed together with its queries as ``[(model, queries)]``.
    """
    from .pipeline import localize_batch

    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {sorted(SWEEP_AXES)}")
    values = list(values)
    if not values:
        raise ValueError("no sweep values")
    rows = []
    for value in values:
        cast = float(value) if axis == "ratio" else int(value)
        cfg = dataclasses.replace(config, **{SWEEP_AXES[axis]: cast})
        results, queries = [], []
        for model, qs in benchmark:
            res, _ = localize_batch(model, params, qs, config=cfg, threads=threads)
            results += res
            queries += qs
        s = summarize(results, queries, thresholds)
        row = {"value": cast, **{k: v for k, v in summary_dict(s).items() if k != "recall_at"}}
        for t, r, f in s["pose"].recalls:
            row[f"recall@{t:g}m,{r:g}deg"] = f
        rows.append(row)
    if out_csv is not None:
        write_csv(rows, out_csv)
    return rows


def write_csv(rows, path):
    if not rows:
        raise ValueError("nothing to write")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
