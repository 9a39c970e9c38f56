import math

import pytest

from gamloc.evaluation import (
    DEFAULT_THRESHOLDS,
    MatchReport,
    _json_safe,
    match_metrics,
    pool_match_reports,
    pose_report,
    recall_at,
    write_csv,
)


def test_match_examples():
    gt = {i: 100 + i for i in range(10)}
    perfect = match_metrics([(i, 100 + i) for i in range(10)], gt)
    assert (perfect.precision, perfect.recall) == (1.0, 1.0)
    empty = match_metrics([], gt)
    assert (empty.precision, empty.recall) == (0.0, 0.0) and empty.precision_undefined
    half = match_metrics([(i, 100 + i) for i in range(5)] + [(i, 0) for i in range(5, 10)], gt)
    assert (half.precision, half.recall) == (0.5, 0.5)


def test_pooling_sums_counts():
    r = pool_match_reports([MatchReport.from_counts(1, 2, 4), MatchReport.from_counts(3, 3, 4)])
    assert (r.true_selected, r.selected, r.true_available) == (4, 5, 8)
    assert r.precision == 0.8 and r.recall == 0.5


def test_recall_examples():
    assert DEFAULT_THRESHOLDS == ((0.25, 2.0), (0.5, 5.0), (5.0, 10.0))
    assert recall_at([(math.inf, math.inf)] * 3) == (0.0, 0.0, 0.0)
    assert recall_at([(0.3, 3.0)]) == (0.0, 1.0, 1.0)
    assert recall_at([(float("nan"), 1.0)]) == (0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        recall_at([])


def test_median_translation():
    rep = pose_report([(0.1, 1.0), (0.3, 1.0), (0.5, 1.0)])
    assert rep.median_translation == 0.3 and rep.n_failed == 0


def test_failures_counted():
    rep = pose_report([(0.1, 1.0), (math.inf, math.inf)])
    assert rep.n_failed == 1 and rep.n_queries == 2


def test_json_safe_infinities():
    assert _json_safe({"a": [math.inf, 1.0, -math.inf]}) == {"a": ["inf", 1.0, "-inf"]}


def test_csv_round_trips_floats(tmp_path):
    write_csv([{"value": 1, "precision": 1 / 3}], tmp_path / "x.csv")
    lines = (tmp_path / "x.csv").read_text().splitlines()
    assert lines[0] == "value,precision"
    assert float(lines[1].split(",")[1]) == 1 / 3
