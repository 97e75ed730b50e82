import json

import numpy as np
import pytest

from blobtrack.engine import (
    CANDIDATE, REC_PROMOTE, REC_SAMPLE, REC_TERMINATE, TERMINATED, VALID,
)
from blobtrack.evaluation import (
    METRICS_CSV_HEADER,
    TrackIndex,
    _greedy_match,
    render,
    score,
)
from blobtrack.events import EventArray


def rec(t, tid, px, py, kind=REC_SAMPLE, status=VALID):
    row = np.zeros(16)
    row[0], row[1], row[2], row[3] = t, tid, kind, status
    row[4], row[5] = px, py
    row[10], row[11] = 2.0, 1.0
    return row


def labeled_stream(objects, t_hi=50_000, step=1000, width=128, height=128):
    """Static labelled objects emitting one event per step, plus label-0 noise."""
    ts, xs, ys, ps, ls = [], [], [], [], []
    for t in range(0, t_hi + 1, step):
        for lab, (ox, oy) in objects.items():
            ts.append(t)
            xs.append(ox)
            ys.append(oy)
            ps.append(1 if (t // step) % 2 == 0 else -1)
            ls.append(lab)
        ts.append(t)
        xs.append(5)
        ys.append(5)
        ps.append(1)
        ls.append(0)
    order = np.argsort(ts, kind="stable")
    return EventArray(
        width, height,
        np.array(ts, dtype=np.int64)[order],
        np.array(xs, dtype=np.int32)[order],
        np.array(ys, dtype=np.int32)[order],
        np.array(ps, dtype=np.int8)[order],
        np.array(ls, dtype=np.uint32)[order],
    )


def test_hand_built_precision_and_recall():
    # one matched track, one false track, one missed object at every sample
    events = labeled_stream({1: (20, 20), 2: (60, 60)})
    records = np.stack(
        [rec(t, 1, 20.5, 20.0) for t in range(0, 50_001, 1000)]
        + [rec(t, 2, 100.0, 100.0) for t in range(0, 50_001, 1000)]
    )
    report = score(records, events, match_radius=5.0, cadence_us=5000)
    assert report.aggregates["samples"] == 11
    np.testing.assert_allclose(report.rows[:, 5], 0.5)  # precision
    np.testing.assert_allclose(report.rows[:, 6], 0.5)  # recall
    assert report.aggregates["precision_mean"] == pytest.approx(0.5)
    assert report.aggregates["recall_mean"] == pytest.approx(0.5)
    assert report.aggregates["false_tracks_mean"] == pytest.approx(1.0)


def test_matching_is_one_to_one():
    # two tracks inside the radius of a single object: only one true match
    events = labeled_stream({1: (20, 20)})
    records = np.stack(
        [rec(t, 1, 20.0, 20.0) for t in range(0, 50_001, 1000)]
        + [rec(t, 2, 22.0, 20.0) for t in range(0, 50_001, 1000)]
    )
    report = score(records, events, match_radius=5.0)
    np.testing.assert_allclose(report.rows[:, 1], 1.0)  # true tracks
    np.testing.assert_allclose(report.rows[:, 2], 1.0)  # false tracks
    np.testing.assert_allclose(report.rows[:, 6], 1.0)  # recall


def test_greedy_match_prefers_nearest():
    tracks = {1: (0.0, 0.0), 2: (1.0, 0.0)}
    objects = {7: (0.9, 0.0)}
    matches = _greedy_match(tracks, objects, radius=5.0)
    assert matches == [(2, 7)]


def test_candidate_tracks_are_not_scored():
    events = labeled_stream({1: (20, 20)})
    records = np.stack(
        [rec(t, 1, 20.0, 20.0, status=CANDIDATE) for t in range(0, 50_001, 1000)]
    )
    report = score(records, events)
    # no valid tracks and a present object: precision undefined, recall 0
    assert np.isnan(report.rows[:, 5]).all()
    np.testing.assert_allclose(report.rows[:, 6], 0.0)
    assert np.isnan(report.aggregates["precision_mean"])


def test_empty_ground_truth_window():
    # only label-0 noise: no objects, and no valid tracks -> precision 1
    events = labeled_stream({})
    records = np.stack(
        [rec(t, 1, 20.0, 20.0, status=CANDIDATE) for t in range(0, 50_001, 1000)]
    )
    report = score(records, events)
    np.testing.assert_allclose(report.rows[:, 5], 1.0)
    assert np.isnan(report.rows[:, 6]).all()


def test_relabeling_ground_truth_is_invariant():
    events_a = labeled_stream({1: (20, 20), 2: (60, 60)})
    events_b = labeled_stream({7: (20, 20), 9: (60, 60)})
    records = np.stack([rec(t, 1, 20.0, 20.0) for t in range(0, 50_001, 1000)])
    ra = score(records, events_a)
    rb = score(records, events_b)
    np.testing.assert_array_equal(ra.rows, rb.rows)


def test_track_index_excludes_terminated():
    records = np.stack(
        [
            rec(1000, 1, 10.0, 10.0, kind=REC_PROMOTE),
            rec(2000, 1, 11.0, 10.0),
            rec(3000, 1, 12.0, 10.0, kind=REC_TERMINATE, status=TERMINATED),
            rec(2500, 2, 50.0, 50.0),
        ]
    )
    index = TrackIndex(records)
    assert set(index.states_at(2200)) == {1}
    assert set(index.states_at(2600)) == {1, 2}
    assert set(index.states_at(3500)) == {2}
    assert index.states_at(500) == {}


def test_score_input_validation():
    events = labeled_stream({1: (20, 20)})
    records = np.stack([rec(t, 1, 20.0, 20.0) for t in range(0, 50_001, 1000)])
    unlabeled = EventArray(
        events.width, events.height, events.t, events.x, events.y, events.polarity
    )
    with pytest.raises(ValueError, match="label"):
        score(records, unlabeled)
    with pytest.raises(ValueError, match="empty"):
        score(np.empty((0, 16)), events)
    late = np.stack([rec(t, 1, 20.0, 20.0) for t in range(60_000, 70_001, 1000)])
    with pytest.raises(ValueError, match="disjoint"):
        score(late, events)


def test_report_csv_and_json(tmp_path):
    events = labeled_stream({1: (20, 20)})
    records = np.stack([rec(t, 1, 20.0, 20.0) for t in range(0, 50_001, 1000)])
    report = score(records, events)
    csv_path = tmp_path / "metrics.csv"
    json_path = tmp_path / "metrics.json"
    report.write_csv(csv_path)
    report.write_json(json_path)
    lines = csv_path.read_text().splitlines()
    assert lines[0] == METRICS_CSV_HEADER
    assert len(lines) == 1 + report.aggregates["samples"]
    agg = json.loads(json_path.read_text())
    assert agg["precision_mean"] == pytest.approx(1.0)
    assert agg["recall_mean"] == pytest.approx(1.0)


def test_render_writes_frames(tmp_path):
    events = labeled_stream({1: (20, 20)}, t_hi=19_999)
    records = np.stack([rec(t, 1, 20.0, 20.0) for t in range(0, 20_000, 1000)])
    paths = render(events, records, tmp_path, frame_period_us=10_000)
    assert len(paths) == 2
    for p in paths:
        assert p.exists()
        assert p.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
